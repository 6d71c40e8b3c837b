"""Blockwise recursive Moore-Penrose (BRMP) least squares for clock offsets.

At every time instance the selected ToAs of all agents form one block of
equations ``y_t = A_t @ delta`` whose rows sum to zero (the common
transmission time has been centered out). :func:`brmp_update_full` folds a
block into the running min-norm weighted least-squares solution without
touching older blocks; :func:`brmp_update_reduced` is the cheaper form that
is exact once every row of the new block already lies in the span of the
rows seen so far.

The forgetting factor enters as in the stacked system
``[A_1 / lam; A_2 / lam**2; ...; A_t / lam**t]``; :func:`direct_lls_solve`
solves that system outright and serves as the reference.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidInputError, NumericalFailureError, SingularityError
from .linalg import complement_projector, mp_pinv, spd_solve
from .model import distance_vector, reduced_row_matrix, subset_union

# Relative cutoff (w.r.t. the 2-norm of A_t) below which singular values of
# C_t = A_t Q_{t-1} count as round-off.
SYNC_RANK_TOL = 1e-10


@dataclass(frozen=True)
class SyncState:
    m: int
    lam: float
    t: int
    delta_hat: np.ndarray
    q_mat: np.ndarray
    r_mat: np.ndarray
    covered_set: tuple = ()


@dataclass(frozen=True)
class MeasurementBlock:
    a_block: np.ndarray  # (M_t, M)
    y_block: np.ndarray  # (M_t,)
    row_sets: tuple  # per-agent subsets, in row order

    @property
    def rows(self):
        return self.a_block.shape[0]


def init_sync(m, lam):
    if m < 2:
        raise InvalidInputError(f"need at least two anchors, got {m}")
    if not (0.0 < lam <= 1.0):
        raise InvalidInputError(f"forgetting factor must lie in (0, 1], got {lam}")
    return SyncState(
        m=m,
        lam=float(lam),
        t=0,
        delta_hat=np.zeros(m),
        q_mat=np.eye(m),
        r_mat=np.zeros((m, m)),
        covered_set=(),
    )


def make_block(row_sets, residuals, m):
    """Stack ``A(S_n) @ residual_n`` for each (subset, length-M residual) pair."""
    if len(row_sets) != len(residuals):
        raise InvalidInputError("need one residual vector per subset")
    a_parts = [reduced_row_matrix(s, m) for s in row_sets]
    y_parts = [a @ np.asarray(v, dtype=float) for a, v in zip(a_parts, residuals)]
    return MeasurementBlock(
        a_block=np.vstack(a_parts),
        y_block=np.concatenate(y_parts),
        row_sets=tuple(tuple(s) for s in row_sets),
    )


def assemble_block(frame, selections, positions, geom):
    """Build ``(A_t, y_t)`` from a frame, the selected subsets and the
    position estimates, one agent after another."""
    n = frame.n_agents
    if len(selections) != n or len(positions) != n:
        raise InvalidInputError(
            f"frame has {n} agents but got {len(selections)} selections and {len(positions)} positions"
        )
    if frame.measurements.shape[1] != geom.m:
        raise InvalidInputError("frame width does not match anchor count")
    residuals = []
    for r, p in zip(frame.measurements, positions):
        p = np.asarray(p, dtype=float)
        if not np.all(np.isfinite(p)):
            raise InvalidInputError("positions must be finite")
        residuals.append(r - distance_vector(p, geom))
    return make_block(selections, residuals, geom.m)


def theorem2_condition(selections, state):
    """True when the simplified recursion is exact for this block: every
    subset holds more than half the anchors and all of them are already
    covered."""
    if not selections:
        return False
    if any(2 * len(s) <= state.m for s in selections):
        return False
    covered = set(state.covered_set)
    return all(i in covered for s in selections for i in s)


def _check_block(state, block):
    if block.a_block.ndim != 2 or block.a_block.shape[1] != state.m:
        raise InvalidInputError(f"block has {block.a_block.shape[1]} columns, state has M={state.m}")
    if block.rows == 0:
        raise InvalidInputError("empty measurement block")
    if block.y_block.shape != (block.rows,):
        raise InvalidInputError("y_block length does not match a_block rows")


def _finish(state, a, y, g):
    """Shared tail of both recursions: offset, Q and R updates."""
    delta = state.delta_hat + g @ (y - a @ state.delta_hat)
    ga = g @ a
    q = state.q_mat - ga @ state.q_mat
    i_ga = np.eye(state.m) - ga
    r = (i_ga @ state.r_mat @ i_ga.T + g @ g.T) / state.lam**2
    # R lies in the row space of the stacked system, i.e. the range of I - Q.
    # Round-off outside it is multiplied by 1/lam^2 every step and must be
    # projected away, or it eventually swamps R when lam < 1.
    rowsp = np.eye(state.m) - q
    r = rowsp @ r @ rowsp.T
    r = 0.5 * (r + r.T)
    return replace(state, t=state.t + 1, delta_hat=delta, q_mat=q, r_mat=r)


def _solve_gain(k_inv, state, rows, branch):
    try:
        return spd_solve(k_inv, np.eye(rows))
    except SingularityError as exc:
        raise NumericalFailureError(
            f"K_t factorization failed at t={state.t + 1} ({branch} branch)",
            {"t": state.t + 1, "branch": branch, "rows": rows, "max_abs": float(np.abs(k_inv).max())},
        ) from exc


def brmp_update_full(state, block, rank_tol=SYNC_RANK_TOL, diagnostics=None):
    """General BRMP step, valid whether or not ``A_t`` brings new row-space
    directions.

    If ``diagnostics`` is a dict it receives ``c_max`` (max-abs entry of
    ``C_t``) and ``c_rank``.
    """
    _check_block(state, block)
    a, y = block.a_block, block.y_block
    a_norm = np.linalg.norm(a, 2)
    c = a @ state.q_mat
    c_pinv = mp_pinv(c, rank_tol, scale=a_norm)
    proj = complement_projector(c, c_pinv=c_pinv)
    if diagnostics is not None:
        diagnostics["c_max"] = float(np.abs(c).max())
        diagnostics["c_rank"] = int(np.linalg.matrix_rank(c_pinv)) if c_pinv.any() else 0
    ra_t = state.r_mat @ a.T
    inner = proj @ (a @ ra_t) @ proj
    k = _solve_gain(np.eye(block.rows) + 0.5 * (inner + inner.T), state, block.rows, "full")
    v = (ra_t - c_pinv @ (a @ ra_t)) @ k @ proj
    return _finish(state, a, y, c_pinv + v)


def brmp_update_reduced(state, block):
    """Simplified BRMP step; exact only when :func:`theorem2_condition` holds
    for ``block.row_sets``."""
    _check_block(state, block)
    a, y = block.a_block, block.y_block
    ra_t = state.r_mat @ a.T
    inner = a @ ra_t
    k = _solve_gain(np.eye(block.rows) + 0.5 * (inner + inner.T), state, block.rows, "reduced")
    return _finish(state, a, y, ra_t @ k)


def cover(state, selections):
    """Return ``state`` with ``covered_set`` enlarged by ``selections``."""
    return replace(state, covered_set=subset_union([state.covered_set, *selections]))


def stack_blocks(blocks, lam):
    """Return ``(A_tilde, y_tilde)`` with block ``u`` (1-based) scaled by
    ``lam ** -u``."""
    if not blocks:
        raise InvalidInputError("need at least one block")
    a_parts, y_parts = [], []
    for u, block in enumerate(blocks, start=1):
        try:
            w = lam ** -u
        except OverflowError as exc:
            raise OverflowError(f"row scaling lam**-{u} overflows") from exc
        with np.errstate(over="ignore"):
            a_parts.append(w * block.a_block)
            y_parts.append(w * block.y_block)
    a_tilde, y_tilde = np.vstack(a_parts), np.concatenate(y_parts)
    if not (np.all(np.isfinite(a_tilde)) and np.all(np.isfinite(y_tilde))):
        raise OverflowError("stacked system overflowed")
    return a_tilde, y_tilde


def direct_lls_solve(blocks, lam, rank_tol=0.0):
    """Min-norm solution of the stacked weighted system via one pseudoinverse.

    Cost and memory grow with the number of blocks; this is the reference the
    recursion must reproduce.
    """
    if not (0.0 < lam <= 1.0):
        raise InvalidInputError(f"forgetting factor must lie in (0, 1], got {lam}")
    a_tilde, y_tilde = stack_blocks(blocks, lam)
    return mp_pinv(a_tilde, rank_tol) @ y_tilde
