"""Question-aware sentence gating for span-extraction and cloze reading comprehension."""

__version__ = "0.1.0"
