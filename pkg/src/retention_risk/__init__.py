"""Retention-in-care risk pipeline: temporal CV, precision@k selection and FOR audits."""

__version__ = "0.1.0"
