import logging

from django.db import DatabaseError, models
from django.utils import timezone

logger = logging.getLogger(__name__)


class BaseModel(models.Model):
    create_time = models.DateTimeField(auto_now_add=True)
    update_time = models.DateTimeField(auto_now=True)
    is_delete = models.BooleanField(default=False)

    class Meta:
        abstract = True  # no table of its own


class RunRecord(BaseModel):
    KIND_CHOICES = [
        ('check', 'check'),
        ('simulate', 'simulate'),
        ('solve', 'solve'),
        ('verify', 'verify'),
    ]
    STATUS_CHOICES = [
        ('ok', 'ok'),
        ('failed', 'failed'),
        ('queued', 'queued'),
    ]

    kind = models.CharField(max_length=16, choices=KIND_CHOICES)
    problem = models.CharField(max_length=200, blank=True, default='')
    seed = models.IntegerField(default=0)
    status = models.CharField(max_length=16, choices=STATUS_CHOICES)
    summary = models.JSONField(default=dict, blank=True)
    artifact_dir = models.CharField(max_length=500, blank=True, null=True)
    task_id = models.CharField(max_length=64, blank=True, null=True, help_text="Celery task id for queued solves")

    class Meta:
        ordering = ['-create_time', '-id']

    def __str__(self):
        return f"{self.kind} {self.problem or '-'} [{self.status}]"

    @classmethod
    def recent(cls, limit=20):
        return cls.objects.filter(is_delete=False)[:limit]

    @classmethod
    def record(cls, kind, problem='', seed=0, status='ok', summary=None, artifact_dir=None, task_id=None):
        """Create a ledger entry; returns None when the database is unavailable."""
        try:
            return cls.objects.create(
                kind=kind,
                problem=problem or '',
                seed=seed,
                status=status,
                summary=summary or {},
                artifact_dir=None if artifact_dir is None else str(artifact_dir),
                task_id=task_id,
            )
        except DatabaseError as exc:
            logger.warning("run ledger unavailable, %s run not recorded: %s", kind, exc)
            return None

    @classmethod
    def finish(cls, record_id, status, summary=None, artifact_dir=None):
        if record_id is None:
            return
        try:
            updated = cls.objects.filter(pk=record_id).update(
                status=status,
                summary=summary or {},
                artifact_dir=None if artifact_dir is None else str(artifact_dir),
                update_time=timezone.now(),
            )
        except DatabaseError as exc:
            logger.warning("run ledger unavailable, record %s not updated: %s", record_id, exc)
            return
        if not updated:
            logger.warning("run record %s vanished before it could be finished", record_id)
