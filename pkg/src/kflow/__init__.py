"""Kernelised normalising flows."""
