"""Round-level Monte Carlo simulator of Coherent-One-Way QKD with an
ETSI GS QKD 014 key-delivery layer."""

__version__ = "0.1.0"
