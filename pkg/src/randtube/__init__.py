"""Heat equation on random moving domains via the domain-mapping method."""

__version__ = "0.1.0"
