"""Deterministic federated-learning simulator: FedGG with FedAvg, FedProx and SCAFFOLD baselines."""

__version__ = "0.1.0"
