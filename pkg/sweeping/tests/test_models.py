from django.test import TestCase

from sweeping.models import RunRecord


class RunRecordTests(TestCase):

    def test_record(self):
        record = RunRecord.record("check", "paper-6-1", 7, "ok", {"pass": True})
        self.assertEqual(record.seed, 7)
        self.assertEqual(record.summary, {"pass": True})
        self.assertIsNone(record.artifact_dir)
        self.assertEqual(str(record), "check paper-6-1 [ok]")

    def test_finish(self):
        record = RunRecord.record("solve", "polygon-2d", status="queued")
        RunRecord.finish(record.pk, "ok", {"J": 0.5}, "/tmp/run")
        record.refresh_from_db()
        self.assertEqual(record.status, "ok")
        self.assertEqual(record.summary, {"J": 0.5})
        self.assertEqual(record.artifact_dir, "/tmp/run")

    def test_finish_without_record(self):
        RunRecord.finish(None, "ok")
        with self.assertLogs("sweeping.models", "WARNING"):
            RunRecord.finish(10 ** 6, "failed")

    def test_recent_skips_deleted(self):
        kept = RunRecord.record("verify", "a")
        hidden = RunRecord.record("verify", "b")
        hidden.is_delete = True
        hidden.save()
        newest = RunRecord.record("simulate", "c")
        self.assertEqual(list(RunRecord.recent()), [newest, kept])
        self.assertEqual(list(RunRecord.recent(1)), [newest])
