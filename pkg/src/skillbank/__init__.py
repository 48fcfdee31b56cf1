"""Self-improving skill library with evidence-driven curation."""

__version__ = "0.1.0"
