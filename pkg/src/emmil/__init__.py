"""EM-style multiple-instance learning for weakly-supervised temporal localization."""

__version__ = "0.1.0"
