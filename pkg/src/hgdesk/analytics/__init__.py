"""Analytic pipelines: questionnaire scoring, gait/TUG, sit-to-stand."""

from hgdesk.analytics import phq8, sts, tug

__all__ = ["phq8", "tug", "sts"]
