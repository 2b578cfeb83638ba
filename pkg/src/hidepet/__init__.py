"""Continual learning on a frozen transformer backbone via lightweight tuning
modules, hierarchical objective decomposition, representation-statistics
recovery, and OOD-gated knowledge pools — plus a Monte-Carlo verifier for the
decomposition bounds and a synthetic benchmark harness."""

__version__ = "0.1.0"
