"""Grammar-driven neuroevolution of CNNs for gamma/proton discrimination."""

__version__ = "0.1.0"
