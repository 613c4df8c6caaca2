"""Proximal iterative Gaussian smoothing: incremental proximal gradient methods run as Kalman filters."""
