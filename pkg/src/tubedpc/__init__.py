"""Tube-DPC: jointly trained neural dynamics + explicit control policy with
online tube-based constraint tightening and Hoeffding certification, applied
to multi-zone building demand response under a time-of-use tariff."""

__version__ = "0.1.0"
