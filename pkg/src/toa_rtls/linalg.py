"""Dense linear-algebra kernel.

Everything that needs a rank decision goes through :func:`mp_pinv`, so the
cutoff for "numerically zero" singular values lives in one place.
"""

import numpy as np
import scipy.linalg

from .errors import InvalidInputError, SingularityError

EPS = np.finfo(float).eps


def _as_finite_2d(a, name="a"):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def default_rank_tol(shape):
    """Relative cutoff used when the caller passes ``rank_tol=0``."""
    return max(shape) * EPS


def mp_pinv(a, rank_tol=0.0, scale=None):
    """Moore-Penrose pseudoinverse through the SVD.

    Parameters
    ----------
    a : (m, n) array_like
    rank_tol : float
        Relative cutoff. Singular values ``<= rank_tol * scale`` are dropped.
        ``0`` selects ``max(m, n) * eps``.
    scale : float, optional
        Reference magnitude for the cutoff. Defaults to the largest singular
        value of ``a``. Pass the norm of a parent matrix when ``a`` may be
        pure round-off (e.g. a product that vanishes in exact arithmetic).

    Returns
    -------
    (n, m) ndarray
    """
    a = _as_finite_2d(a)
    if rank_tol < 0 or not np.isfinite(rank_tol):
        raise InvalidInputError(f"rank_tol must be a finite nonnegative number, got {rank_tol}")
    m, n = a.shape
    if a.size == 0:
        return np.zeros((n, m))
    if rank_tol == 0:
        rank_tol = default_rank_tol(a.shape)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    ref = s[0] if scale is None else float(scale)
    if s[0] == 0.0 or s[0] <= rank_tol * ref:
        return np.zeros((n, m))
    keep = s > rank_tol * ref
    r = int(np.count_nonzero(keep))
    return (vt[:r].T / s[:r]) @ u[:, :r].T


def spd_solve(a, b):
    """Solve ``a @ x = b`` for symmetric positive definite ``a`` by Cholesky."""
    a = _as_finite_2d(a)
    b = np.asarray(b, dtype=float)
    if a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"a must be square, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise InvalidInputError(f"shape mismatch: a {a.shape}, b {b.shape}")
    if not np.all(np.isfinite(b)):
        raise InvalidInputError("b contains non-finite entries")
    scale = max(np.abs(a).max(initial=0.0), 1.0)
    if np.abs(a - a.T).max(initial=0.0) > 1e-10 * scale:
        raise SingularityError("matrix is not symmetric")
    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"Cholesky factorization failed: {exc}") from exc
    return scipy.linalg.cho_solve(factor, b, check_finite=False)


def complement_projector(c, rank_tol=0.0, scale=None, c_pinv=None):
    """Orthogonal projector onto the complement of the column space of ``c``,
    i.e. ``I - c @ pinv(c)``.

    ``c_pinv`` may be supplied when the caller already holds ``mp_pinv(c,
    rank_tol, scale)``.
    """
    c = _as_finite_2d(c, "c")
    if c_pinv is None:
        c_pinv = mp_pinv(c, rank_tol, scale)
    p = np.eye(c.shape[0]) - c @ c_pinv
    return 0.5 * (p + p.T)
