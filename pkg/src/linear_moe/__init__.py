"""Linear sequence modeling + mixture-of-experts, with simulated parallelism."""
