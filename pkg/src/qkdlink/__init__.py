"""qkdlink: entanglement-based QKD link simulator and autonomous pipeline."""

__version__ = "0.1.0"
