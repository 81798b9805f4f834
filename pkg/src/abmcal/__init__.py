"""Calibration toolkit for agent-based models."""
