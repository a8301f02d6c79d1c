from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='RunRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('create_time', models.DateTimeField(auto_now_add=True)),
                ('update_time', models.DateTimeField(auto_now=True)),
                ('is_delete', models.BooleanField(default=False)),
                ('kind', models.CharField(choices=[('check', 'check'), ('simulate', 'simulate'), ('solve', 'solve'), ('verify', 'verify')], max_length=16)),
                ('problem', models.CharField(blank=True, default='', max_length=200)),
                ('seed', models.IntegerField(default=0)),
                ('status', models.CharField(choices=[('ok', 'ok'), ('failed', 'failed'), ('queued', 'queued')], max_length=16)),
                ('summary', models.JSONField(blank=True, default=dict)),
                ('artifact_dir', models.CharField(blank=True, max_length=500, null=True)),
                ('task_id', models.CharField(blank=True, help_text='Celery task id for queued solves', max_length=64, null=True)),
            ],
            options={
                'ordering': ['-create_time', '-id'],
            },
        ),
    ]
