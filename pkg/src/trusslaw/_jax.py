"""Single import point for jax with float64 enabled."""

import os

os.environ.setdefault("XLA_FLAGS", "--xla_cpu_multi_thread_eigen=false intra_op_parallelism_threads=1")

import jax  # noqa: E402

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402

__all__ = ["jax", "jnp", "bucket"]


def bucket(n: int, minimum: int = 8) -> int:
    """Smallest power of two >= n, so jitted kernels see few distinct shapes."""
    size = minimum
    while size < n:
        size *= 2
    return size
