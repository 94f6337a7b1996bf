"""Question-guided sub-image selection for vision-language answering."""

__version__ = "0.1.0"
