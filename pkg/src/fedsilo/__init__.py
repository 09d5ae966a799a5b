"""fedsilo: synchronous cross-silo federated training with client-adaptive feature transforms."""

__version__ = "0.1.0"
