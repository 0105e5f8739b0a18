"""Federated learning simulation and gradient leakage attacks."""
