"""Pytest wiring: run tests from the Django project directory, as ``manage.py test`` does."""

from pathlib import Path

import pytest


@pytest.fixture(autouse=True)
def _project_cwd(monkeypatch):
    """Run every test with the project directory as the working directory."""
    monkeypatch.chdir(Path(__file__).resolve().parent)
