"""Worker-level consistency diagnostics for synchronous data-parallel training."""

__version__ = "0.1.0"
