"""Log-structured object store on emulated host-managed zoned drives."""

__version__ = "0.1.0"
