"""Neuro-symbolic fusion of general-KG facts into a domain KG."""

__version__ = "0.1.0"
