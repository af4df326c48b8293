"""Run artifacts: JSON-lines logs, summary tables, and rollout exports.

Every artifact carries the seed in its header and no wall-clock data, so a
fixed seed reproduces each file byte for byte. Floats are written with
shortest round-trip precision; the jsonl and csv rollout forms are
mutually lossless for the fields they represent (time, marker positions,
marker velocities). Missing samples (dropout) are null in jsonl and empty
cells in csv.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .curves import CommandSpline
from .plant import MeasuredRollout


def atomic_write(path, text: str) -> None:
    """Write via a temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def _jnum(x: float):
    return None if np.isnan(x) else float(x)


def _unjnum(x) -> float:
    return np.nan if x is None else float(x)


# ---------------------------------------------------------------------------
# rollout trajectories


@dataclass
class RolloutTable:
    """Flat, export-oriented view of a measured rollout: one frame per
    marker sample, markers and velocities as 3N-wide rows."""

    seed: int
    marker_count: int
    fault: bool
    fault_time: float | None
    times: np.ndarray  # (m,)
    markers: np.ndarray  # (m, 3N)
    velocities: np.ndarray  # (m, 3N)

    @staticmethod
    def from_measured(measured: MeasuredRollout) -> "RolloutTable":
        m = len(measured.marker_times)
        return RolloutTable(
            seed=int(measured.seed),
            marker_count=measured.markers.shape[1],
            fault=bool(measured.fault),
            fault_time=measured.fault_time,
            times=np.asarray(measured.marker_times, dtype=float),
            markers=measured.markers.reshape(m, -1).copy(),
            velocities=measured.marker_velocities.reshape(m, -1).copy(),
        )

    def to_jsonl(self) -> str:
        header = {
            "format": "rollout/v1",
            "seed": self.seed,
            "marker_count": self.marker_count,
            "fault": self.fault,
            "fault_time": self.fault_time,
        }
        lines = [json.dumps(header)]
        for i in range(len(self.times)):
            lines.append(
                json.dumps(
                    {
                        "t": float(self.times[i]),
                        "markers": [_jnum(v) for v in self.markers[i]],
                        "marker_velocities": [_jnum(v) for v in self.velocities[i]],
                    }
                )
            )
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_jsonl(text: str) -> "RolloutTable":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = json.loads(lines[0])
        if header.get("format") != "rollout/v1":
            raise ValueError(f"not a rollout log (format={header.get('format')!r})")
        times, markers, velocities = [], [], []
        for ln in lines[1:]:
            frame = json.loads(ln)
            times.append(float(frame["t"]))
            markers.append([_unjnum(v) for v in frame["markers"]])
            velocities.append([_unjnum(v) for v in frame["marker_velocities"]])
        return RolloutTable(
            seed=int(header["seed"]),
            marker_count=int(header["marker_count"]),
            fault=bool(header["fault"]),
            fault_time=header["fault_time"],
            times=np.array(times),
            markers=np.array(markers),
            velocities=np.array(velocities),
        )

    def to_csv(self) -> str:
        ft = "" if self.fault_time is None else repr(float(self.fault_time))
        meta = (
            f"# format=rollout/v1 seed={self.seed} marker_count={self.marker_count} "
            f"fault={'true' if self.fault else 'false'} fault_time={ft}"
        )
        cols = ["t"]
        for j in range(self.marker_count):
            cols += [f"m{j}_x", f"m{j}_y", f"m{j}_z"]
        for j in range(self.marker_count):
            cols += [f"v{j}_x", f"v{j}_y", f"v{j}_z"]
        lines = [meta, ",".join(cols)]
        for i in range(len(self.times)):
            row = [repr(float(self.times[i]))]
            row += [_cell(v) for v in self.markers[i]]
            row += [_cell(v) for v in self.velocities[i]]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_csv(text: str) -> "RolloutTable":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("# format=rollout/v1"):
            raise ValueError("not a rollout csv (missing '# format=rollout/v1' header)")
        meta = dict(
            item.split("=", 1) for item in lines[0][1:].strip().split() if "=" in item
        )
        width = len(lines[1].split(","))
        n_m = (width - 1) // 6
        data = []
        for ln in lines[2:]:
            data.append([float(c) if c else np.nan for c in ln.split(",")])
        arr = np.array(data) if data else np.empty((0, width))
        return RolloutTable(
            seed=int(meta["seed"]),
            marker_count=int(meta["marker_count"]),
            fault=meta["fault"] == "true",
            fault_time=float(meta["fault_time"]) if meta.get("fault_time") else None,
            times=arr[:, 0],
            markers=arr[:, 1 : 1 + 3 * n_m],
            velocities=arr[:, 1 + 3 * n_m :],
        )

    def same_as(self, other: "RolloutTable") -> bool:
        return (
            self.seed == other.seed
            and self.marker_count == other.marker_count
            and self.fault == other.fault
            and self.fault_time == other.fault_time
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.markers, other.markers, equal_nan=True)
            and np.array_equal(self.velocities, other.velocities, equal_nan=True)
        )


# ---------------------------------------------------------------------------
# learning-run artifacts


def run_log_jsonl(records, seed: int, cfg) -> str:
    """One header line, then one line per executed trial (wall-clock times
    are deliberately excluded so the log is seed-deterministic)."""
    header = {
        "format": "ilc-run/v1",
        "seed": int(seed),
        "max_iterations": cfg.max_iterations,
        "success_threshold": cfg.success_threshold,
        "mode": cfg.mode,
    }
    lines = [json.dumps(header)]
    for r in records:
        truncated = r.error is None
        lines.append(
            json.dumps(
                {
                    "type": "trial",
                    "iteration": r.iteration,
                    "trial_seed": int(r.measured.seed),
                    "truncated": truncated,
                    "objective": None if truncated else float(r.objective),
                    "success": bool(r.success),
                    "fault_time": r.measured.fault_time,
                    "error": None if truncated else [float(v) for v in r.error],
                    "command": {
                        "duration": float(r.command.duration),
                        "knots": r.command.knots.tolist(),
                    },
                }
            )
        )
    return "\n".join(lines) + "\n"


def summary_csv(records, seed: int) -> str:
    """iteration, cost, success — one row per executed trial."""
    lines = [f"# seed={int(seed)}", "iteration,cost,success"]
    for r in records:
        cost = "inf" if r.error is None else repr(float(r.objective))
        lines.append(f"{r.iteration},{cost},{'true' if r.success else 'false'}")
    return "\n".join(lines) + "\n"


def command_json(command: CommandSpline, seed: int) -> str:
    return json.dumps(
        {
            "format": "command/v1",
            "seed": int(seed),
            "duration": float(command.duration),
            "knots": command.knots.tolist(),
        },
        indent=2,
    )


def parse_command_json(text: str) -> CommandSpline:
    obj = json.loads(text)
    if obj.get("format") != "command/v1":
        raise ValueError(f"not a command file (format={obj.get('format')!r})")
    return CommandSpline(float(obj["duration"]), np.array(obj["knots"], dtype=float))


def with_seed_header(table: str, seed: int) -> str:
    return f"# seed={int(seed)}\n{table}"
