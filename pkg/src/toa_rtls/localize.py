"""NLoS identification and single-agent localization.

The agent position and its LoS anchor subset are found by alternating two
steps: fit the position to the currently selected ToAs (a small nonlinear
least-squares problem solved with BFGS), then keep the anchors whose centered
residuals are smallest. The loop stops when the selected subset repeats.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidInputError, SingularityError
from .model import check_subset, distance_vector

ANCHOR_GUARD = 1e-9  # meters
EPS = np.finfo(float).eps
ARMIJO_C1 = 1e-4
MAX_BACKTRACKS = 30
STEP_TOL = 1e-13
MAX_STEP = 10.0  # meters; near-singular curvature must not launch the iterate


@dataclass(frozen=True)
class LocalizationConfig:
    alpha: float = 0.88
    k_max: int = 20
    k_ne: int = 50
    grad_tol: float = 1e-9
    init_strategy: str = "previous-estimate"
    init_height: Optional[float] = None  # start height for 3-D cold starts
    fixed_height: Optional[float] = None  # known agent height; pins z in 3-D

    def __post_init__(self):
        if not (0.5 < self.alpha <= 1.0):
            raise InvalidInputError(f"alpha must lie in (0.5, 1], got {self.alpha}")
        if self.k_max < 1 or self.k_ne < 1:
            raise InvalidInputError("k_max and k_ne must be >= 1")
        if self.init_strategy not in ("previous-estimate", "anchor-centroid"):
            raise InvalidInputError(f"unknown init_strategy {self.init_strategy!r}")

    def keep_count(self, m):
        # small slack so that e.g. 0.88 * 25 = 22.000000000000004 keeps 22
        return min(m, math.ceil(self.alpha * m - 1e-9))


@dataclass(frozen=True)
class PositionFit:
    position: np.ndarray
    objective: float
    grad_norm: float
    iterations: int
    converged: bool
    history: tuple  # objective after each accepted step, starting at p_init


@dataclass(frozen=True)
class LocalizationResult:
    position: np.ndarray
    selected_set: tuple
    outer_iters: int
    converged_by_set: bool
    final_objective: float
    solver_converged: bool = True


class _Objective:
    """``f(p) = ||B F (r - d(p) - delta)||^2`` restricted to subset ``s``.

    With ``fixed_height`` set (3-D only) the free variable is the horizontal
    position and the height is pinned; ``embed`` maps free variables back to
    a full coordinate vector.
    """

    def __init__(self, s, r, delta_hat, geom, fixed_height=None):
        m = geom.m
        s = check_subset(s, m)
        r = np.asarray(r, dtype=float)
        delta_hat = np.asarray(delta_hat, dtype=float)
        if r.shape != (m,) or delta_hat.shape != (m,):
            raise InvalidInputError(f"r and delta_hat must have length {m}")
        if fixed_height is not None and geom.dim != 3:
            raise InvalidInputError("fixed_height needs a 3-D geometry")
        idx = list(s)
        self.anchors = geom.anchors[idx]
        self.base = r[idx] - delta_hat[idx]
        self.inv_c = 1.0 / geom.c
        self.fixed_height = fixed_height
        self.n_free = geom.dim if fixed_height is None else 2

    def embed(self, x):
        if self.fixed_height is None:
            return x
        return np.array([x[0], x[1], self.fixed_height])

    def free(self, p):
        return np.array(p[: self.n_free], dtype=float)

    def _residual(self, x):
        diff = self.anchors[:, : self.n_free] - x
        if self.fixed_height is not None:
            dz = self.anchors[:, 2] - self.fixed_height
            dist = np.sqrt((diff * diff).sum(axis=1) + dz * dz)
        else:
            dist = np.sqrt((diff * diff).sum(axis=1))
        w = self.base - dist * self.inv_c
        return w - w.sum() / w.shape[0], diff, dist

    def __call__(self, x):
        w = self._residual(x)[0]
        return float(w @ w)

    def value_and_grad(self, x):
        w, diff, dist = self._residual(x)
        if dist.min() <= ANCHOR_GUARD:
            raise SingularityError("position coincides with a selected anchor; gradient undefined")
        # d/dp of -dist_m / c is (q_m - p) / (c dist_m); B is a projector so
        # A^T A w is just the centered residual.
        grad = (2.0 * self.inv_c) * ((w / dist) @ diff)
        return float(w @ w), grad

    def gauss_newton_inverse(self, x):
        """Inverse of ``2 J^T B J`` at ``x``; None when singular."""
        _, diff, dist = self._residual(x)
        jac = -diff / (dist[:, None] / self.inv_c)
        jac = jac - jac.mean(axis=0)
        hess = 2.0 * jac.T @ jac
        try:
            h = np.linalg.inv(hess)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(h)) or np.linalg.eigvalsh(0.5 * (h + h.T)).min() <= 0:
            return None
        return 0.5 * (h + h.T)


def objective_and_gradient(p, s, r, delta_hat, geom):
    """Value and analytic gradient of the centered position objective."""
    p = np.asarray(p, dtype=float)
    if p.shape != (geom.dim,):
        raise InvalidInputError(f"position must have shape ({geom.dim},)")
    return _Objective(s, r, delta_hat, geom).value_and_grad(p)


def _bfgs(obj, x0, k_ne, grad_tol):
    x = np.array(x0, dtype=float)
    f, g = obj.value_and_grad(x)
    history = [f]
    # Gauss-Newton curvature as the starting inverse Hessian; the objective is
    # badly scaled (ns^2 vs m) so the identity is a poor start.
    h = obj.gauss_newton_inverse(x)
    gnorm = float(np.linalg.norm(g))
    it = 0
    while gnorm > grad_tol and it < k_ne:
        step = -g / max(gnorm, 1.0) if h is None else -h @ g
        step_len = float(np.linalg.norm(step))
        if step_len > MAX_STEP:
            step *= MAX_STEP / step_len
        slope = float(g @ step)
        if slope >= 0:
            h = None
            step = -g / max(gnorm, 1.0)
            slope = float(g @ step)
        # Near the optimum the decrease drops below round-off in f; allow a
        # few ulps so the gradient test, not the line search, ends the run.
        slack = 8 * EPS * abs(f)
        t = 1.0
        for _ in range(MAX_BACKTRACKS):
            x_new = x + t * step
            f_new = obj(x_new)
            if f_new <= f + ARMIJO_C1 * t * slope + slack:
                break
            t *= 0.5
        else:
            break
        if np.linalg.norm(x_new - x) <= STEP_TOL * (1.0 + np.linalg.norm(x)):
            break  # stalled at round-off
        try:
            f_new, g_new = obj.value_and_grad(x_new)
        except SingularityError:
            break
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            if h is None:
                h = (sy / float(y @ y)) * np.eye(x.shape[0])
            rho = 1.0 / sy
            hy = h @ y
            h = h - rho * (np.outer(s, hy) + np.outer(hy, s)) + (rho * rho * float(y @ hy) + rho) * np.outer(s, s)
        x, f, g = x_new, f_new, g_new
        gnorm = float(np.linalg.norm(g))
        history.append(f)
        it += 1
    return PositionFit(
        position=obj.embed(x),
        objective=f,
        grad_norm=gnorm,
        iterations=it,
        converged=gnorm <= grad_tol,
        history=tuple(history),
    )


def solve_position(r, s, delta_hat, p_init, geom, cfg=None):
    """Minimize the centered objective over the position with BFGS.

    Never raises on non-convergence: the best iterate is returned with
    ``converged=False``.
    """
    cfg = cfg or LocalizationConfig()
    p_init = np.asarray(p_init, dtype=float)
    if p_init.shape != (geom.dim,) or not np.all(np.isfinite(p_init)):
        raise InvalidInputError("p_init must be a finite coordinate vector")
    obj = _Objective(s, r, delta_hat, geom, cfg.fixed_height)
    return _bfgs(obj, obj.free(p_init), cfg.k_ne, cfg.grad_tol)


def _centered(r, p, delta_hat, geom, s):
    w = (np.asarray(r, dtype=float) - distance_vector(p, geom) - np.asarray(delta_hat, dtype=float))[list(s)]
    return w - w.mean()


def residual_vector(r, p_hat, delta_hat, geom):
    """Residual over all anchors with its mean removed."""
    p_hat = np.asarray(p_hat, dtype=float)
    if not np.all(np.isfinite(p_hat)):
        raise InvalidInputError("p_hat must be finite")
    e = np.asarray(r, dtype=float) - distance_vector(p_hat, geom) - np.asarray(delta_hat, dtype=float)
    return e - e.mean()


def select_los_set(e, m, alpha):
    """Indices of the ``ceil(alpha * m)`` smallest ``|e|``, ties to the lower
    index, returned in increasing order."""
    e = np.asarray(e, dtype=float)
    if e.shape != (m,):
        raise InvalidInputError(f"e must have length {m}")
    keep = LocalizationConfig(alpha=alpha).keep_count(m)
    order = np.argsort(np.abs(e), kind="stable")
    return tuple(sorted(int(i) for i in order[:keep]))


def rlsr_localize(r, delta_hat, geom, cfg=None, p_init=None, fixed_set: Optional[tuple] = None):
    """Alternate position fits and residual trimming until the subset repeats.

    ``fixed_set`` bypasses the trimming step (all-anchor or known-LoS
    baselines): the position is fitted once on that subset.
    """
    cfg = cfg or LocalizationConfig()
    m = geom.m
    if p_init is None:
        p_init = start_point(geom, cfg)
    if fixed_set is not None:
        s = check_subset(fixed_set, m)
        fit = solve_position(r, s, delta_hat, p_init, geom, cfg)
        return LocalizationResult(
            position=fit.position,
            selected_set=s,
            outer_iters=1,
            converged_by_set=True,
            final_objective=fit.objective,
            solver_converged=fit.converged,
        )
    prev = tuple(range(m))
    p = np.asarray(p_init, dtype=float)
    converged_by_set = False
    all_converged = True
    k = 0
    fit = None
    for k in range(1, cfg.k_max + 1):
        fit = solve_position(r, prev, delta_hat, p, geom, cfg)
        all_converged &= fit.converged
        p = fit.position
        cur = select_los_set(residual_vector(r, p, delta_hat, geom), m, cfg.alpha)
        if cur == prev:
            converged_by_set = True
            break
        prev = cur
    final_set = cur
    return LocalizationResult(
        position=p,
        selected_set=final_set,
        outer_iters=k,
        converged_by_set=converged_by_set,
        final_objective=float(np.sum(_centered(r, p, delta_hat, geom, final_set) ** 2)),
        solver_converged=all_converged,
    )


def anchor_centroid(geom, height=None):
    """Mean anchor position, moved to ``height`` in 3-D.

    Without a height the start is put 1 m below the mean anchor height: with
    coplanar anchors the objective is mirror-symmetric about their plane and
    the vertical gradient vanishes on it.
    """
    c = geom.anchors.mean(axis=0).copy()
    if geom.dim == 3:
        c[2] = c[2] - 1.0 if height is None else height
    return c


def start_point(geom, cfg):
    """Cold-start position for ``cfg``."""
    h = cfg.fixed_height if cfg.fixed_height is not None else cfg.init_height
    return anchor_centroid(geom, h)
