"""Weak-instrument diagnostics with many instruments."""
