from django.contrib import admin

from .models import RunRecord

admin.site.site_header = 'Sweeping runs'
admin.site.index_title = 'Run ledger'


@admin.register(RunRecord)
class RunRecordAdmin(admin.ModelAdmin):
    list_display = ('kind', 'problem', 'status', 'seed', 'artifact_dir', 'create_time')
    search_fields = ('problem', 'artifact_dir', 'task_id')
    list_filter = ('kind', 'status')
    readonly_fields = ('summary', 'task_id')
