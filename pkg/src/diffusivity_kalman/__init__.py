"""Augmented Kalman smoothing for time-dependent diffusivity estimation."""
