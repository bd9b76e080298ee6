# Generated by Django 4.2.23 on 2026-10-18 10:12

from django.db import migrations, models
import django.db.models.deletion
import uuid


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.UUIDField(default=uuid.uuid4, editable=False, primary_key=True, serialize=False)),
                ('subcommand', models.CharField(choices=[('sample-cdlt', 'Sample CDLT'), ('geometry-stats', 'Geometry Statistics'), ('mc-run', 'Monte Carlo Run'), ('oracle-check', 'Oracle Check'), ('mw-verify', 'Symmetry Verifier')], max_length=20)),
                ('seed', models.DecimalField(decimal_places=0, help_text='64-bit experiment seed', max_digits=20)),
                ('workers', models.IntegerField(default=1, help_text='Declared worker count, part of the reproducibility key')),
                ('config', models.JSONField(blank=True, default=dict)),
                ('config_hash', models.CharField(blank=True, max_length=64)),
                ('tool_version', models.CharField(blank=True, max_length=20)),
                ('output_dir', models.CharField(blank=True, max_length=500)),
                ('output_hashes', models.JSONField(blank=True, default=dict, help_text='Artifact name to git blob hash')),
                ('status', models.CharField(choices=[('pending', 'Pending'), ('processing', 'Processing'), ('completed', 'Completed'), ('failed', 'Failed')], default='pending', max_length=20)),
                ('failure_stage', models.CharField(blank=True, max_length=50)),
                ('error_message', models.TextField(blank=True)),
                ('exit_code', models.IntegerField(default=0)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='StageRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('name', models.CharField(max_length=50)),
                ('position', models.IntegerField()),
                ('wall_time', models.FloatField(help_text='Wall time in seconds')),
                ('status', models.CharField(choices=[('completed', 'Completed'), ('failed', 'Failed')], default='completed', max_length=20)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='stages', to='core.experimentrun')),
            ],
            options={
                'ordering': ['run', 'position'],
                'unique_together': {('run', 'position')},
            },
        ),
    ]
