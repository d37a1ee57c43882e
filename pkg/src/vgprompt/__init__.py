"""Low-rank graph prompts for a frozen toy vision GNN."""

__version__ = "0.1.0"
