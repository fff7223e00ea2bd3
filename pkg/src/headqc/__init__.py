"""Quality control toolkit for batches of co-registered CT head volumes."""

__version__ = "0.1.0"
