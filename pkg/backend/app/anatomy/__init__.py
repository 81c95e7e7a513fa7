"""Geometry, rig, registration, prior and planning engine."""
