"""Siamese tracker compression: student search and teacher-students distillation."""

__version__ = "0.1.0"
