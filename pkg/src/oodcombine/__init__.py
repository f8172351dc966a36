"""Feature-space OOD detection: individual measures, a learned combined score,
and reference-aware evaluation."""

__version__ = "0.1.0"
