"""spankey - key-subspace-conditioned inference on small dense networks."""
