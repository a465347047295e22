"""Virtual trusted execution environment."""
