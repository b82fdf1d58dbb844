"""Fingerprinting deep packet inspection middleboxes with crafted TCP/IP probes."""

__version__ = "0.1.0"
