"""Predict braking intensity from EEG band power of selected independent components."""

__version__ = "0.1.0"
