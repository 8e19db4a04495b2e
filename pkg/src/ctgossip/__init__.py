"""Detect Certificate Transparency split views by cloning STHs seen on the wire and auditing them off-path."""

__version__ = "0.1.0"
