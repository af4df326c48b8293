"""Task-level iterative learning loop and its experiment drivers.

One iteration runs the current command on the plant, extracts the rope
state error at the demonstrated critical time, maps it through the
inverse model, and subtracts the command update. Learning stops at the
first trial whose weighted critical cost falls below the success
threshold (by default; repeated updates after a success can drift away
from it) or when the iteration budget runs out.

Success here is a cost threshold, not knot topology: the default 0.25 on
the weighted critical cost corresponds to roughly 5 cm RMS per-marker
position error under the default position weight of 25.

Trial seeds are split deterministically from the run seed by counter
(seed, iteration, attempt), so identical configurations reproduce
identical experiments bit for bit.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .arm import ChainSpec, JointLimits, default_chain
from .curves import CommandSpline
from .demoio import Demonstration
from .inverse import InverseContext, QpWeights, inverse_model
from .plant import MeasuredRollout, PlantConfig, execute_trial
from .ropesim import RopeParams
from .tracking import track_demonstration

DEFAULT_THRESHOLD = 0.25


class TruncatedBeforeCritical(RuntimeError):
    """The measured rollout ends (fault) or drops out before the critical
    time, so no error can be extracted."""


class IlcAborted(RuntimeError):
    """Unrecoverable failure mid-run; carries everything recorded so far."""

    def __init__(self, message: str, records: list):
        super().__init__(message)
        self.records = records


@dataclass
class IlcConfig:
    max_iterations: int = 10
    success_threshold: float = DEFAULT_THRESHOLD
    mode: str = "critical"  # or "equal": weight all pre-critical samples
    stop_on_first_success: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("need at least one iteration")
        if self.success_threshold <= 0:
            raise ValueError("success threshold must be positive")
        if self.mode not in ("critical", "equal"):
            raise ValueError(f"unknown objective mode {self.mode!r}")


@dataclass
class TrialRecord:
    iteration: int
    command: CommandSpline
    measured: MeasuredRollout
    error: np.ndarray | None  # (6N,), None when the trial was truncated
    objective: float  # weighted critical cost; inf for truncated trials
    success: bool
    wall_time_s: float

    def __post_init__(self):
        if self.objective < 0:
            raise ValueError("objective must be nonnegative")
        if self.success and self.error is None:
            raise ValueError("a successful trial must carry its error")


def _interp_rows(grid: np.ndarray, values: np.ndarray, t: float) -> np.ndarray:
    """Linear interpolation of (m, ...) samples at one time."""
    i = min(max(int(np.searchsorted(grid, t)), 1), len(grid) - 1)
    w = (t - grid[i - 1]) / (grid[i] - grid[i - 1])
    return (1.0 - w) * values[i - 1] + w * values[i]


def critical_point_error(measured: MeasuredRollout, demo: Demonstration) -> np.ndarray:
    """x_k(t_c) - x_demo(t_c), stacked positions then velocities (6N,).

    The critical time is a fixed offset from motion start, so it is the
    same number on the trial clock and the (re-timed) demonstration clock.
    """
    t_c = demo.critical_time
    grid = measured.marker_times
    if len(grid) < 2 or grid[-1] < t_c - 1e-9:
        end = grid[-1] if len(grid) else float("nan")
        raise TruncatedBeforeCritical(
            f"measured rollout ends at {end:.4f} s, before the critical time {t_c:.4f} s"
        )
    if measured.markers.shape[1] != demo.marker_count:
        raise ValueError(
            f"marker count mismatch: plant {measured.markers.shape[1]}, "
            f"demonstration {demo.marker_count}"
        )
    pos = _interp_rows(grid, measured.markers, t_c)
    vel = _interp_rows(grid, measured.marker_velocities, t_c)
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
        raise TruncatedBeforeCritical("marker dropout at the critical time")
    state = np.concatenate([pos.ravel(), vel.ravel()])
    return state - demo.rope_state_at(t_c)


def weighted_critical_cost(error: np.ndarray, weights: QpWeights | None = None) -> float:
    weights = weights or QpWeights()
    return float(error @ (weights.critical_diagonal(len(error)) * error))


def _trial_seed(seed: int, *counters: int) -> int:
    return int(np.random.SeedSequence((seed, *counters)).generate_state(1)[0])


def _measured_state_fn(measured: MeasuredRollout):
    grid = measured.marker_times

    def state_at(t: float) -> np.ndarray:
        pos = _interp_rows(grid, measured.markers, t)
        vel = _interp_rows(grid, measured.marker_velocities, t)
        return np.concatenate([pos.ravel(), vel.ravel()])

    return state_at


def run_ilc(
    demo: Demonstration,
    chain: ChainSpec,
    rope_params: RopeParams,
    plant: PlantConfig,
    cfg: IlcConfig | None = None,
    *,
    limits: JointLimits | None = None,
    weights: QpWeights | None = None,
    seed: int = 0,
    initial_command: CommandSpline | None = None,
    on_iteration=None,
) -> list:
    """Learn a command for the demonstration against the given plant.

    Returns one TrialRecord per executed trial. A trial truncated before
    the critical time is recorded as failed and repeated once with a fresh
    seed; a second truncation aborts (IlcAborted carries the records), as
    does any inverse-model failure.
    """
    cfg = cfg or IlcConfig()
    limits = limits or JointLimits.defaults()
    weights = weights or QpWeights()
    command = initial_command
    if command is None:
        command = track_demonstration(demo, chain, limits)

    records: list = []
    for k in range(cfg.max_iterations):
        measured = None
        error = None
        for attempt in range(2):
            start = time.perf_counter()
            measured = execute_trial(command, plant, seed=_trial_seed(seed, k, attempt))
            try:
                error = critical_point_error(measured, demo)
                break
            except TruncatedBeforeCritical as err:
                records.append(
                    TrialRecord(
                        iteration=k,
                        command=command,
                        measured=measured,
                        error=None,
                        objective=float("inf"),
                        success=False,
                        wall_time_s=time.perf_counter() - start,
                    )
                )
                if attempt == 1:
                    raise IlcAborted(
                        f"iteration {k}: trial truncated before the critical time "
                        f"twice in a row ({err})",
                        records,
                    ) from err
        objective = weighted_critical_cost(error, weights)
        success = objective < cfg.success_threshold
        record = TrialRecord(
            iteration=k,
            command=command,
            measured=measured,
            error=error,
            objective=objective,
            success=success,
            wall_time_s=time.perf_counter() - start,
        )
        records.append(record)
        if on_iteration is not None:
            on_iteration(record)
        if success and cfg.stop_on_first_success:
            break
        if k + 1 == cfg.max_iterations:
            break
        ctx = InverseContext(
            chain=chain,
            command=command,
            rope_params=rope_params,
            demo=demo,
            limits=limits,
            weights=weights,
            mode="equal" if cfg.mode == "equal" else "weighted",
            measured_states=_measured_state_fn(measured) if cfg.mode == "equal" else None,
        )
        try:
            update = inverse_model(error, ctx)
        except Exception as err:
            raise IlcAborted(f"iteration {k}: inverse model failed ({err})", records) from err
        command = CommandSpline(command.duration, command.knots - update.du)
    return records


def trials_to_success(records: list, max_iterations: int) -> int:
    """1-based count of trials until the first success; K+1 when none."""
    for r in records:
        if r.success:
            return r.iteration + 1
    return max_iterations + 1


# ---------------------------------------------------------------------------
# experiment drivers


def _experiment_cell(args) -> int:
    """Worker for one independent run inside a driver; picklable.

    An aborted run (double truncation or inverse failure) never reached
    success, so it reports the sentinel rather than crashing the sweep.
    """
    demo, chain, rope_params, plant, cfg, limits, weights, seed, command = args
    try:
        records = run_ilc(
            demo, chain, rope_params, plant, cfg,
            limits=limits, weights=weights, seed=seed, initial_command=command,
        )
    except IlcAborted:
        return cfg.max_iterations + 1
    return trials_to_success(records, cfg.max_iterations)


def _run_cells(tasks: list, jobs: int) -> list:
    if jobs <= 1:
        return [_experiment_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_experiment_cell, tasks))


def _render_trials(value: int, k_max: int) -> str:
    return f">{k_max}" if value > k_max else str(value)


def _parse_trials(text: str, k_max: int) -> int:
    return k_max + 1 if text.startswith(">") else int(text)


@dataclass
class TransferResult:
    """Trials-to-success matrix: rows = rope the command was learned on,
    columns = rope it was transferred to. Entries above max_iterations
    mean the budget ran out (rendered as ">K")."""

    ids: list
    matrix: np.ndarray  # (n, n) int
    max_iterations: int

    def to_csv(self) -> str:
        lines = ["learned_on\\applied_to," + ",".join(str(i) for i in self.ids)]
        for i, row_id in enumerate(self.ids):
            cells = [_render_trials(int(v), self.max_iterations) for v in self.matrix[i]]
            lines.append(f"{row_id}," + ",".join(cells))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_csv(text: str, max_iterations: int) -> "TransferResult":
        lines = [ln for ln in text.strip().splitlines() if ln and not ln.startswith("#")]
        ids = lines[0].split(",")[1:]
        matrix = np.array(
            [[_parse_trials(c, max_iterations) for c in ln.split(",")[1:]] for ln in lines[1:]],
            dtype=int,
        )
        return TransferResult(ids, matrix, max_iterations)


def transfer_experiment(
    demos: dict,
    commands: dict,
    plants: dict,
    cfg: IlcConfig | None = None,
    *,
    rope_params: RopeParams | None = None,
    chain: ChainSpec | None = None,
    limits: JointLimits | None = None,
    weights: QpWeights | None = None,
    seed: int = 0,
    jobs: int = 1,
) -> TransferResult:
    """Re-learn every command on every plant, warm-started by transfer.

    For each source A and target B, run_ilc starts from A's learned
    command on B's plant against B's demonstration; the matrix entry is
    the 1-based trial count until success (max_iterations + 1 when the
    budget runs out or the run aborts). Diagonal entries re-run the
    learned command on its own plant and should succeed on the first
    trial. Cells are independent and seeded by (i, j), so results do not
    depend on execution order or on jobs.
    """
    if set(demos) != set(commands) or set(demos) != set(plants):
        raise ValueError("demos, commands, and plants must share the same keys")
    ids = list(commands)
    if len(ids) < 2:
        raise ValueError("transfer needs at least two presets")
    cfg = cfg or IlcConfig()
    rope_params = rope_params or RopeParams()
    chain = chain or default_chain()
    n = len(ids)
    tasks = [
        (demos[dst], chain, rope_params, plants[dst], cfg, limits, weights,
         _trial_seed(seed, 1, i, j), commands[src])
        for i, src in enumerate(ids)
        for j, dst in enumerate(ids)
    ]
    matrix = np.array(_run_cells(tasks, jobs), dtype=int).reshape(n, n)
    return TransferResult(ids, matrix, cfg.max_iterations)


@dataclass
class SweepResult:
    """Trials-to-success per learner model parameter point; the plant and
    the demonstration are fixed."""

    rows: list = field(default_factory=list)  # (stiffness, end_mass, trials)
    max_iterations: int = 10

    def to_csv(self) -> str:
        lines = ["stiffness,end_mass,trials"]
        for k, m_e, trials in self.rows:
            lines.append(f"{k:.6g},{m_e:.6g},{_render_trials(trials, self.max_iterations)}")
        return "\n".join(lines) + "\n"


def sensitivity_sweep(
    demo: Demonstration,
    plant: PlantConfig,
    grid,
    cfg: IlcConfig | None = None,
    *,
    base_params: RopeParams | None = None,
    chain: ChainSpec | None = None,
    limits: JointLimits | None = None,
    weights: QpWeights | None = None,
    seed: int = 0,
    initial_command: CommandSpline | None = None,
    jobs: int = 1,
) -> SweepResult:
    """Vary only the learner's rope stiffness and end mass over the grid.

    The initial command comes from tracking the demonstration once (it is
    kinematic, so it does not depend on the rope model) and is shared by
    every grid point unless one is supplied. Grid points are independent
    and seeded by index, so results do not depend on jobs.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty parameter grid")
    cfg = cfg or IlcConfig()
    chain = chain or default_chain()
    limits = limits or JointLimits.defaults()
    base = base_params or RopeParams()
    if initial_command is None:
        initial_command = track_demonstration(demo, chain, limits)
    tasks = [
        (demo, chain, base.replace(stiffness=float(k), end_mass=float(m)), plant,
         cfg, limits, weights, _trial_seed(seed, 2, idx), initial_command)
        for idx, (k, m) in enumerate(grid)
    ]
    counts = _run_cells(tasks, jobs)
    result = SweepResult(max_iterations=cfg.max_iterations)
    for (k, m), trials in zip(grid, counts):
        result.rows.append((float(k), float(m), trials))
    return result
