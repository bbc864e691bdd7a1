# Generated by Django 4.2 on 2026-10-19 09:12

from django.db import migrations, models


class Migration(migrations.Migration):
    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="ScenarioRun",
            fields=[
                ("id", models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name="ID")),
                ("name", models.CharField(max_length=80)),
                ("path", models.CharField(blank=True, default="", max_length=255)),
                ("seed", models.BigIntegerField(default=0)),
                (
                    "outcome",
                    models.IntegerField(choices=[(0, "Passed"), (1, "Failed"), (2, "Error")], default=0),
                ),
                ("trace_digest", models.CharField(blank=True, default="", max_length=64)),
                ("report", models.JSONField(default=dict)),
                ("failures", models.JSONField(default=list)),
                ("created", models.DateTimeField(auto_now_add=True)),
            ],
            options={
                "ordering": ["-created"],
            },
        ),
    ]
