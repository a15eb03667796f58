"""Array-namespace dispatch so the same numerics run on NumPy or JAX.

Everything numeric in the package is written against an ``xp`` namespace.
Plain NumPy is the default; when any argument is a JAX array (or tracer)
the JAX namespace is used instead, which is how the trainer obtains
gradients without a second copy of the formulas.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

JITTER_START = 1e-6
JITTER_MAX = 1e-2


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a matrix stays indefinite after jitter escalation."""


def _is_jax(a) -> bool:
    return type(a).__module__.startswith(("jax", "jaxlib"))


def namespace(*arrays):
    """Return ``jax.numpy`` if any argument is a JAX array, else ``numpy``."""
    for a in arrays:
        if _is_jax(a):
            import jax.numpy as jnp

            return jnp
    return np


def is_jax_namespace(xp) -> bool:
    return xp is not np


def solve_triangular(xp, L, b, lower=True, trans=0):
    if is_jax_namespace(xp):
        import jax.scipy.linalg

        return jax.scipy.linalg.solve_triangular(L, b, lower=lower, trans=trans)
    return scipy.linalg.solve_triangular(L, b, lower=lower, trans=trans)


def symmetrize(xp, A):
    return 0.5 * (A + xp.swapaxes(A, -1, -2))


def jitter_cholesky(A, what: str = "matrix", start: float = JITTER_START):
    """Lower Cholesky factor of ``A`` with escalating diagonal jitter.

    The first attempt adds ``start * mean(diag(A))`` (``start=0`` tries the
    matrix as is); on failure the relative jitter restarts at ``1e-6`` and
    grows by x10 up to ``1e-2``. Traced JAX arrays cannot branch on the
    outcome, so they get a single attempt at ``start``.

    Returns
    -------
    L : array
        Lower-triangular factor of ``A + jitter * I``.
    jitter : float
        Relative jitter level that succeeded.
    """
    xp = namespace(A)
    A = symmetrize(xp, A)
    M = A.shape[-1]
    if is_jax_namespace(xp):
        if start > 0:
            A = A + start * xp.mean(xp.diagonal(A)) * xp.eye(M)
        return xp.linalg.cholesky(A), start
    scale = float(np.mean(np.diagonal(A)))
    if not np.isfinite(scale) or scale <= 0.0:
        raise NotPositiveDefiniteError(f"{what}: non-positive mean diagonal {scale!r}")
    levels = [start] if start > 0 else [0.0]
    rel = JITTER_START
    while rel <= JITTER_MAX * (1 + 1e-9):
        if rel > levels[-1]:
            levels.append(rel)
        rel *= 10.0
    eye = np.eye(M)
    for rel in levels:
        try:
            return np.linalg.cholesky(A + rel * scale * eye), rel
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefiniteError(f"{what}: not positive definite even with jitter {JITTER_MAX:g}")


def chol_logdet(xp, L):
    return 2.0 * xp.sum(xp.log(xp.diagonal(L)))


def chunked_sum(fn, n: int, chunk: int, xp):
    """Sum ``fn(start, stop)`` over consecutive index blocks of ``range(n)``.

    Under JAX each block is rematerialised in the backward pass, which keeps
    reverse-mode memory at one block instead of all ``n`` points.
    """
    if n == 0:
        return None
    chunk = max(1, int(chunk))
    if is_jax_namespace(xp) and n > chunk:
        import jax

        fn = jax.checkpoint(fn, static_argnums=(0, 1))
    total = None
    for start in range(0, n, chunk):
        part = fn(start, min(n, start + chunk))
        total = part if total is None else total + part
    return total
