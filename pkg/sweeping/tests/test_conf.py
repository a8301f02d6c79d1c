from django.test import SimpleTestCase, override_settings

from sweeping.conf import SWEEPING_DEFAULTS, coerce, env_overrides, sweep_setting


class CoerceTests(SimpleTestCase):

    def test_types_follow_the_default(self):
        self.assertIs(coerce("yes", False), True)
        self.assertIs(coerce("off", True), False)
        self.assertEqual(coerce("4", 1), 4)
        self.assertEqual(coerce("1e-3", 0.5), 1e-3)
        self.assertEqual(coerce("/tmp/runs", "./runs"), "/tmp/runs")

    def test_bad_number(self):
        with self.assertRaises(ValueError):
            coerce("many", 1)


class EnvironmentTests(SimpleTestCase):

    def test_overrides(self):
        merged = env_overrides(environ={"SWEEP_THREADS": "4", "SWEEP_RECORD_RUNS": "0", "SWEEP_ATOL": "",
                                        "SWEEP_UNKNOWN": "1"})
        self.assertEqual(merged["THREADS"], 4)
        self.assertIs(merged["RECORD_RUNS"], False)
        self.assertEqual(merged["ATOL"], SWEEPING_DEFAULTS["ATOL"])
        self.assertNotIn("UNKNOWN", merged)

    def test_defaults_untouched(self):
        env_overrides(environ={"SWEEP_THREADS": "8"})
        self.assertEqual(SWEEPING_DEFAULTS["THREADS"], 1)


class SettingTests(SimpleTestCase):

    @override_settings(SWEEPING={"THREADS": 3})
    def test_settings_block_wins(self):
        self.assertEqual(sweep_setting("THREADS"), 3)
        self.assertEqual(sweep_setting("ACTIVE_TOL"), 1e-6)

    @override_settings(SWEEPING=None)
    def test_missing_block(self):
        self.assertEqual(sweep_setting("SPIKE_FACTOR"), 10.0)

    def test_unknown_setting(self):
        with self.assertRaises(KeyError):
            sweep_setting("GAMMA")
