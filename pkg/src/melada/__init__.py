"""Meta-learned domain adaptation for cross-subject EEG emotion recognition."""

__version__ = "0.1.0"
