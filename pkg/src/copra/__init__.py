"""Instance-conditioned low-rank adaptation of a frozen toy vision-language
model for weakly supervised video anomaly detection."""

__version__ = "0.1.0"
