"""Single-stage conversational QA by dense phrase retrieval."""

__version__ = "0.1.0"
