"""Scenario generation, Monte-Carlo driver and metrics.

Defaults reproduce the reference setup: a 32 m x 32 m square, a 5 x 5 anchor
grid at 5 m height, four agents at 1.5 m, 12 % NLoS ToAs with 10-40 ns bias,
clock offsets in [-8, 8] ns and sigma = 0.4 ns.
"""

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .engine import SELECTION_MODES, StepInfo, init_engine, step
from .errors import InvalidInputError
from .localize import LocalizationConfig
from .model import SPEED_OF_LIGHT, AgentTruth, NetworkGeometry, generate_frame
from .sync import direct_lls_solve

# Refuse direct re-solves whose stacked system would exceed this many rows.
DIRECT_MAX_ROWS = 2_000_000


@dataclass(frozen=True)
class ScenarioConfig:
    m: int = 25
    n_agents: int = 4
    area_side: float = 32.0
    anchor_height: float = 5.0
    agent_height: float = 1.5
    sigma: float = 0.4
    nlos_fraction: float = 0.12
    nlos_range: tuple = (10.0, 40.0)
    offset_range: tuple = (-8.0, 8.0)
    tx_time_range: tuple = (0.0, 100.0)
    lam: float = 0.8
    alpha: float = 0.88
    t_max: int = 500
    trials: int = 50
    seed: int = 2025
    selection_mode: str = "rlsr"
    c: float = SPEED_OF_LIGHT
    k_max: int = 20
    k_ne: int = 50
    grad_tol: float = 1e-9
    known_height: bool = True

    def __post_init__(self):
        for name in ("nlos_range", "offset_range", "tx_time_range"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        root = math.isqrt(self.m) if self.m >= 0 else -1
        if self.m < 4 or root * root != self.m:
            raise InvalidInputError(f"anchor count must be a perfect square >= 4, got {self.m}")
        if self.n_agents < 1:
            raise InvalidInputError("n_agents must be >= 1")
        if not (0.0 <= self.nlos_fraction < 0.5):
            raise InvalidInputError(f"nlos_fraction must lie in [0, 0.5), got {self.nlos_fraction}")
        if not (0.5 < self.alpha <= 1.0):
            raise InvalidInputError(f"alpha must lie in (0.5, 1], got {self.alpha}")
        if not (0.0 < self.lam <= 1.0):
            raise InvalidInputError(f"lambda must lie in (0, 1], got {self.lam}")
        if self.sigma < 0:
            raise InvalidInputError("sigma must be >= 0")
        if self.t_max < 1 or self.trials < 1:
            raise InvalidInputError("t_max and trials must be >= 1")
        if self.selection_mode not in SELECTION_MODES:
            raise InvalidInputError(f"selection_mode must be one of {SELECTION_MODES}")
        lo, hi = self.nlos_range
        if self.nlos_fraction > 0 and not (0 < lo <= hi):
            raise InvalidInputError("nlos_range must be positive and ordered")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @property
    def nlos_count(self):
        # 0.12 * 25 = 3.0000000000000004 must round up to 3, not 4
        return math.ceil(self.nlos_fraction * self.m - 1e-9)

    def localization_config(self):
        return LocalizationConfig(
            alpha=self.alpha,
            k_max=self.k_max,
            k_ne=self.k_ne,
            grad_tol=self.grad_tol,
            init_height=self.agent_height,
            fixed_height=self.agent_height if self.known_height else None,
        )


@dataclass
class TrialResult:
    pos_rmse: np.ndarray  # (T,) root of the per-agent mean squared error
    clock_rmse: np.ndarray  # (T,) gauge-aligned
    step_time: np.ndarray  # (T,) seconds, frame generation excluded
    full_branch: np.ndarray  # (T,) bool
    grew: np.ndarray  # (T,) bool, covered set enlarged at this step
    nlos_hits: np.ndarray  # (T,) correctly rejected NLoS ToAs
    nlos_total: np.ndarray  # (T,) true NLoS ToAs
    nlos_cell_frac: np.ndarray  # (T,) sum of per-agent identified fractions
    nlos_cells: np.ndarray  # (T,) agents with a nonempty NLoS set
    delta_hat: np.ndarray = None  # (T, M), kept only when requested
    selections: list = None
    truths: list = None


@dataclass
class MetricsSeries:
    pos_rmse: np.ndarray
    clock_rmse: np.ndarray
    step_time: np.ndarray
    full_branch_frac: np.ndarray
    nlos_accuracy: float
    branch_counts: dict = field(default_factory=dict)
    max_growth: int = 0
    trials: int = 0

    def mean_after(self, t0, attr="pos_rmse"):
        """Average of a per-t series over ``t > t0`` (t is 1-based)."""
        return float(np.mean(getattr(self, attr)[t0:]))


def build_geometry(cfg):
    """Square grid of ``sqrt(M) x sqrt(M)`` anchors covering the area."""
    root = math.isqrt(cfg.m)
    if root * root != cfg.m or root < 2:
        raise InvalidInputError(f"anchor count must be a perfect square >= 4, got {cfg.m}")
    ticks = [cfg.area_side * i / (root - 1) for i in range(root)]
    anchors = [(x, y, cfg.anchor_height) for x in ticks for y in ticks]
    return NetworkGeometry(np.array(anchors), c=cfg.c)


def trial_rng(seed, k):
    """Generator for trial ``k``: ``SeedSequence([seed, k])``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(k)]))


def draw_agents(cfg, rng):
    m, n_nlos = cfg.m, cfg.nlos_count
    agents = []
    for _ in range(cfg.n_agents):
        xy = rng.uniform(0.0, cfg.area_side, size=2)
        tau = rng.uniform(*cfg.tx_time_range)
        nlos = rng.choice(m, size=n_nlos, replace=False) if n_nlos else np.array([], dtype=int)
        b = np.zeros(m)
        b[nlos] = rng.uniform(*cfg.nlos_range, size=n_nlos)
        los = tuple(sorted(set(range(m)) - {int(i) for i in nlos}))
        agents.append(AgentTruth(np.array([xy[0], xy[1], cfg.agent_height]), tau, los, b))
    return agents


def draw_offsets(cfg, rng):
    return rng.uniform(*cfg.offset_range, size=cfg.m)


def aligned_clock_rmse(delta_hat, delta_true):
    """RMS offset error after removing the common (unidentifiable) shift."""
    err = np.asarray(delta_hat) - np.asarray(delta_true)
    err = err - err.mean()
    return float(np.sqrt(np.mean(err**2)))


def position_rmse(estimates, truths):
    """Root of the mean over agents of the squared position error."""
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truths, dtype=float)
    return float(np.sqrt(np.mean(np.sum((est - tru) ** 2, axis=-1))))


def nlos_accuracy(estimated_sets, truth_sets, m):
    """Mean fraction of true NLoS ToAs that the selection left out.

    ``estimated_sets`` and ``truth_sets`` are aligned nested sequences
    (time, agent) of selected-LoS and true-LoS index tuples. Cells with no
    true NLoS ToA are skipped; returns NaN when every cell is skipped.
    """
    fracs = []
    for est_t, tru_t in zip(estimated_sets, truth_sets, strict=True):
        for est, los in zip(est_t, tru_t, strict=True):
            nlos = set(range(m)) - set(los)
            if not nlos:
                continue
            fracs.append(len(nlos - set(est)) / len(nlos))
    return float(np.mean(fracs)) if fracs else float("nan")


def _frames(cfg, geom, rng):
    offsets = draw_offsets(cfg, rng)
    for t in range(1, cfg.t_max + 1):
        agents = draw_agents(cfg, rng)
        yield offsets, generate_frame(geom, agents, offsets, cfg.sigma, rng, t=t)


def run_trial(cfg, trial_seed, keep_traces=False):
    """One Monte-Carlo trial. ``trial_seed`` is an int or a Generator."""
    rng = trial_seed if isinstance(trial_seed, np.random.Generator) else trial_rng(cfg.seed, trial_seed)
    geom = build_geometry(cfg)
    state = init_engine(
        geom, cfg.lam, cfg.localization_config(), n_agents=cfg.n_agents, selection_mode=cfg.selection_mode
    )
    T = cfg.t_max
    out = TrialResult(
        pos_rmse=np.zeros(T),
        clock_rmse=np.zeros(T),
        step_time=np.zeros(T),
        full_branch=np.zeros(T, dtype=bool),
        grew=np.zeros(T, dtype=bool),
        nlos_hits=np.zeros(T, dtype=int),
        nlos_total=np.zeros(T, dtype=int),
        nlos_cell_frac=np.zeros(T),
        nlos_cells=np.zeros(T, dtype=int),
    )
    if keep_traces:
        out.delta_hat = np.zeros((T, cfg.m))
        out.selections, out.truths = [], []
    for offsets, frame in _frames(cfg, geom, rng):
        i = frame.t - 1
        info = StepInfo()
        tic = time.perf_counter()
        results, state = step(state, frame, info)
        out.step_time[i] = time.perf_counter() - tic
        out.full_branch[i] = info.branch == "full"
        out.grew[i] = info.grew
        out.pos_rmse[i] = position_rmse([r.position for r in results], [a.position for a in frame.truth])
        out.clock_rmse[i] = aligned_clock_rmse(state.sync.delta_hat, offsets)
        for res, agent in zip(results, frame.truth):
            nlos = set(agent.nlos_set)
            if nlos:
                hit = len(nlos - set(res.selected_set))
                out.nlos_hits[i] += hit
                out.nlos_total[i] += len(nlos)
                out.nlos_cell_frac[i] += hit / len(nlos)
                out.nlos_cells[i] += 1
        if keep_traces:
            out.delta_hat[i] = state.sync.delta_hat
            out.selections.append([r.selected_set for r in results])
            out.truths.append(frame.truth)
    return out


def _trial_job(args):
    cfg, k = args
    return run_trial(cfg, k)


def default_workers():
    env = os.environ.get("TOA_RTLS_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_trials(cfg, workers=1):
    jobs = [(cfg, k) for k in range(cfg.trials)]
    if workers <= 1 or cfg.trials == 1:
        return [_trial_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_trial_job, jobs))


def aggregate(trials):
    """Average per-trial series in trial order (deterministic reduction)."""
    cells = sum(int(tr.nlos_cells.sum()) for tr in trials)
    frac = sum(float(tr.nlos_cell_frac.sum()) for tr in trials)
    full = sum(int(tr.full_branch.sum()) for tr in trials)
    total = sum(tr.full_branch.size for tr in trials)
    return MetricsSeries(
        pos_rmse=np.mean([tr.pos_rmse for tr in trials], axis=0),
        clock_rmse=np.mean([tr.clock_rmse for tr in trials], axis=0),
        step_time=np.mean([tr.step_time for tr in trials], axis=0),
        full_branch_frac=np.mean([tr.full_branch for tr in trials], axis=0),
        nlos_accuracy=frac / cells if cells else float("nan"),
        branch_counts={"full": full, "reduced": total - full},
        max_growth=max(int(tr.grew.sum()) for tr in trials),
        trials=len(trials),
    )


def run_monte_carlo(cfg, workers=1):
    return aggregate(run_trials(cfg, workers))


@dataclass
class RuntimeSeries:
    brmp_step_s: np.ndarray
    direct_step_s: np.ndarray
    localize_s: np.ndarray
    brmp_sync_s: np.ndarray
    direct_sync_s: np.ndarray
    max_delta_gap: float  # largest |delta_brmp - delta_direct| seen

    def slope_drift(self, attr="brmp_step_s"):
        """Least-squares slope of the series times (T - 1), relative to its
        mean: the fitted start-to-end change as a fraction of the mean."""
        y = getattr(self, attr)
        t = np.arange(1, y.size + 1, dtype=float)
        slope = np.polyfit(t, y, 1)[0]
        return float(slope * (y.size - 1) / y.mean())


def runtime_comparison(cfg, repeats=3, direct_every=1):
    """Per-step wall time with the recursive update vs. re-solving the stacked
    system from scratch.

    Each repeat runs one trial; at every step the localization time, the
    recursive update time and the time of a direct pseudoinverse solve over
    all blocks so far are measured on the same data. A step of either variant
    costs localization plus its own synchronization. Per-t medians over the
    repeats are returned.
    """
    T = cfg.t_max
    loc = np.zeros((repeats, T))
    brmp = np.zeros((repeats, T))
    direct = np.full((repeats, T), np.nan)
    gap = 0.0
    geom = build_geometry(cfg)
    for rep in range(repeats):
        rng = trial_rng(cfg.seed, rep)
        state = init_engine(
            geom, cfg.lam, cfg.localization_config(), n_agents=cfg.n_agents, selection_mode=cfg.selection_mode
        )
        blocks, rows = [], 0
        for _, frame in _frames(cfg, geom, rng):
            i = frame.t - 1
            info = StepInfo()
            _, state = step(state, frame, info)
            loc[rep, i] = info.localize_s
            brmp[rep, i] = info.sync_s
            blocks.append(info.block)
            rows += info.block.rows
            if rows > DIRECT_MAX_ROWS:
                raise MemoryError(f"direct re-solve would stack {rows} rows at t={frame.t}")
            if frame.t % direct_every == 0 or frame.t == T:
                tic = time.perf_counter()
                d = direct_lls_solve(blocks, cfg.lam)
                direct[rep, i] = time.perf_counter() - tic
                gap = max(gap, float(np.abs(d - state.sync.delta_hat).max()))
    loc_m = np.median(loc, axis=0)
    brmp_m = np.median(brmp, axis=0)
    direct_m = np.median(direct, axis=0)
    return RuntimeSeries(
        brmp_step_s=loc_m + brmp_m,
        direct_step_s=loc_m + direct_m,
        localize_s=loc_m,
        brmp_sync_s=brmp_m,
        direct_sync_s=direct_m,
        max_delta_gap=gap,
    )


def with_overrides(cfg, **kw):
    kw = {k: v for k, v in kw.items() if v is not None}
    return replace(cfg, **kw) if kw else cfg
