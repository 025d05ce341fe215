"""HTTP service wrapping the experiment harness."""
