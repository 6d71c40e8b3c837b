"""Per-frame driver: localize every agent against the previous clock-offset
estimate, then fold the frame into the offset estimate."""

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import InvalidInputError
from .localize import LocalizationConfig, rlsr_localize, start_point
from .sync import (
    SYNC_RANK_TOL,
    assemble_block,
    brmp_update_full,
    brmp_update_reduced,
    cover,
    init_sync,
    theorem2_condition,
)

SELECTION_MODES = ("rlsr", "all", "oracle")


class StepError(RuntimeError):
    """Wraps a failure inside :func:`step` with the frame / agent it hit."""

    def __init__(self, message, t, agent=None):
        super().__init__(message)
        self.t = t
        self.agent = agent


@dataclass(frozen=True)
class EngineState:
    sync: object
    geom: object
    loc_cfg: LocalizationConfig
    last_positions: Optional[tuple] = None
    history_len: int = 0
    n_agents: Optional[int] = None
    rank_tol: float = SYNC_RANK_TOL
    selection_mode: str = "rlsr"


@dataclass
class StepInfo:
    """Side-channel record of one step, for metrics and benchmarks."""

    branch: str = ""
    grew: bool = False
    localize_s: float = 0.0
    sync_s: float = 0.0
    block: object = None
    extra: dict = field(default_factory=dict)


def init_engine(geom, lam, loc_cfg=None, n_agents=None, rank_tol=SYNC_RANK_TOL, selection_mode="rlsr"):
    if selection_mode not in SELECTION_MODES:
        raise InvalidInputError(f"selection_mode must be one of {SELECTION_MODES}")
    return EngineState(
        sync=init_sync(geom.m, lam),
        geom=geom,
        loc_cfg=loc_cfg or LocalizationConfig(),
        n_agents=n_agents,
        rank_tol=rank_tol,
        selection_mode=selection_mode,
    )


def _fixed_set(state, frame, n):
    if state.selection_mode == "all":
        return tuple(range(state.geom.m))
    if state.selection_mode == "oracle":
        if frame.truth is None:
            raise InvalidInputError("oracle selection needs ground truth in the frame")
        return frame.truth[n].los_set
    return None


def step(state, frame, info=None):
    """Process one frame. Returns ``(results, new_state)``.

    ``info`` (a :class:`StepInfo`) is filled in when given.
    """
    t = state.history_len + 1
    if frame.t != t:
        raise InvalidInputError(f"expected frame t={t}, got t={frame.t}")
    n_agents = frame.n_agents
    if state.n_agents is not None and n_agents != state.n_agents:
        raise InvalidInputError(f"expected {state.n_agents} agents, frame has {n_agents}")
    if frame.measurements.shape[1] != state.geom.m:
        raise InvalidInputError("frame width does not match anchor count")

    geom, cfg = state.geom, state.loc_cfg
    delta_prev = state.sync.delta_hat
    tic = time.perf_counter()
    results = []
    for n in range(n_agents):
        if cfg.init_strategy == "previous-estimate" and state.last_positions is not None:
            p0 = state.last_positions[n]
        else:
            p0 = start_point(geom, cfg)
        try:
            res = rlsr_localize(
                frame.measurements[n], delta_prev, geom, cfg, p_init=p0, fixed_set=_fixed_set(state, frame, n)
            )
        except (ArithmeticError, ValueError) as exc:
            raise StepError(f"localization failed at t={t}, agent {n}: {exc}", t, n) from exc
        results.append(res)
    toc = time.perf_counter()

    selections = [r.selected_set for r in results]
    positions = [r.position for r in results]
    try:
        block = assemble_block(frame, selections, positions, geom)
        if theorem2_condition(selections, state.sync):
            branch = "reduced"
            new_sync = brmp_update_reduced(state.sync, block)
        else:
            branch = "full"
            new_sync = cover(brmp_update_full(state.sync, block, state.rank_tol), selections)
    except (ArithmeticError, ValueError) as exc:
        raise StepError(f"synchronization failed at t={t}: {exc}", t) from exc
    tac = time.perf_counter()

    if info is not None:
        info.branch = branch
        info.grew = new_sync.covered_set != state.sync.covered_set
        info.localize_s = toc - tic
        info.sync_s = tac - toc
        info.block = block

    new_state = replace(
        state,
        sync=new_sync,
        last_positions=tuple(np.array(p) for p in positions),
        history_len=t,
        n_agents=n_agents,
    )
    return results, new_state


def covered_set_growth_count(trace):
    """Number of steps at which the covered anchor set changed.

    ``trace`` is the sequence of engine states of one run, starting with the
    initial state.
    """
    sets = [s.sync.covered_set for s in trace]
    return sum(1 for a, b in zip(sets, sets[1:]) if a != b)
