"""Cache placement and multicast delivery for cloud-based small cell networks."""

__version__ = "0.1.0"
