"""Domain-decomposition LSPG model reduction with hyper-reduction."""
