"""User-space multikernel serverless runtime."""

__version__ = "0.1.0"
