from django.contrib import admin
from .models import ExperimentRun, StageRecord


class StageRecordInline(admin.TabularInline):
    model = StageRecord
    extra = 0
    readonly_fields = ['name', 'position', 'wall_time', 'status', 'created_at']
    ordering = ['position']


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ['subcommand', 'seed', 'status', 'failure_stage', 'tool_version', 'created_at']
    list_filter = ['subcommand', 'status', 'created_at']
    search_fields = ['config_hash', 'output_dir', 'error_message']
    readonly_fields = ['id', 'config_hash', 'output_hashes', 'created_at', 'updated_at']
    ordering = ['-created_at']
    inlines = [StageRecordInline]

    fieldsets = (
        (None, {
            'fields': ('subcommand', 'seed', 'workers', 'status', 'exit_code')
        }),
        ('Configuration', {
            'fields': ('config', 'config_hash', 'tool_version'),
            'classes': ('wide',)
        }),
        ('Artifacts', {
            'fields': ('output_dir', 'output_hashes'),
            'classes': ('collapse',)
        }),
        ('Errors', {
            'fields': ('failure_stage', 'error_message'),
            'classes': ('collapse',)
        }),
        ('Metadata', {
            'fields': ('id', 'created_at', 'updated_at'),
            'classes': ('collapse',)
        }),
    )


@admin.register(StageRecord)
class StageRecordAdmin(admin.ModelAdmin):
    list_display = ['run', 'position', 'name', 'wall_time', 'status', 'created_at']
    list_filter = ['status', 'name']
    search_fields = ['name']
    readonly_fields = ['created_at']
    ordering = ['run', 'position']
