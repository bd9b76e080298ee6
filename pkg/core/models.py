from django.db import models
import uuid


class ExperimentRun(models.Model):
    """
    One invocation of a lorentzfk subcommand, mirroring manifest.json
    """
    SUBCOMMAND_CHOICES = [
        ('sample-cdlt', 'Sample CDLT'),
        ('geometry-stats', 'Geometry Statistics'),
        ('mc-run', 'Monte Carlo Run'),
        ('oracle-check', 'Oracle Check'),
        ('mw-verify', 'Symmetry Verifier'),
    ]

    STATUS_CHOICES = [
        ('pending', 'Pending'),
        ('processing', 'Processing'),
        ('completed', 'Completed'),
        ('failed', 'Failed'),
    ]

    id = models.UUIDField(primary_key=True, default=uuid.uuid4, editable=False)
    subcommand = models.CharField(max_length=20, choices=SUBCOMMAND_CHOICES)
    seed = models.DecimalField(max_digits=20, decimal_places=0, help_text="64-bit experiment seed")
    workers = models.IntegerField(default=1, help_text="Declared worker count, part of the reproducibility key")
    config = models.JSONField(default=dict, blank=True)
    config_hash = models.CharField(max_length=64, blank=True)
    tool_version = models.CharField(max_length=20, blank=True)
    output_dir = models.CharField(max_length=500, blank=True)
    output_hashes = models.JSONField(default=dict, blank=True, help_text="Artifact name to git blob hash")

    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='pending')
    failure_stage = models.CharField(max_length=50, blank=True)
    error_message = models.TextField(blank=True)
    exit_code = models.IntegerField(default=0)

    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.subcommand} seed={self.seed} ({self.status})"


class StageRecord(models.Model):
    STATUS_CHOICES = [
        ('completed', 'Completed'),
        ('failed', 'Failed'),
    ]

    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name='stages')
    name = models.CharField(max_length=50)
    position = models.IntegerField()  # Order of the stage within the run
    wall_time = models.FloatField(help_text="Wall time in seconds")
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='completed')
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['run', 'position']
        unique_together = ['run', 'position']

    def __str__(self):
        return f"Stage {self.position} '{self.name}' of {self.run_id}"
