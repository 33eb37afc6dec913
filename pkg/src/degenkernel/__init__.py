"""Heat kernels and Davies-type bounds for random walks among degenerate conductances."""
