"""Active learning for local polynomial smoothing."""
