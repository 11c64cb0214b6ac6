"""Aesthetic evaluation of interior walkthrough videos from video + gaze."""

__version__ = "0.1.0"
