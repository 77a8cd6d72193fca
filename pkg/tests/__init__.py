"""Baobao test suite."""
