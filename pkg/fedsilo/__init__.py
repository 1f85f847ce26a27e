"""Cross-silo federated learning simulator with Shapley and Owen explanations."""

__version__ = "0.3.0"
