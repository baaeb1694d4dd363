"""Episode metrics and the nearest-distance accuracy score.

ExecTime is measured in policy steps and TrajLen in meters of integrated robot
path; both are averaged over successful episodes only and are absent (``None``,
an empty CSV cell) when no episode succeeded.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

CSV_FIELDS = ("label", "episodes", "sr", "reach", "exec_time", "traj_len", "error", "acc")


@dataclass(frozen=True)
class EpisodeSummary:
    outcome: str
    steps: int
    path_len: float
    reached: bool
    placed: tuple = ()
    final_d: float = 0.0

    def __post_init__(self):
        if self.path_len < 0:
            raise ValueError("path length must be non-negative")
        if not 0 <= self.steps <= 1000:
            raise ValueError("steps must lie in [0, 1000]")

    @classmethod
    def from_record(cls, rec: dict) -> "EpisodeSummary":
        return cls(rec["outcome"], int(rec["steps"]), float(rec["path_len"]), bool(rec["reached"]),
                   tuple(rec.get("placed", ())), float(rec.get("final_d", 0.0)))


@dataclass(frozen=True)
class MetricsReport:
    episodes: int
    sr: float  # percent
    reach: float  # percent
    exec_time: float | None
    traj_len: float | None
    error: float  # mean normalized error in [0, 1]

    @property
    def acc(self) -> float:
        return 1.0 - self.error

    def row(self, label: str = "") -> dict:
        d = asdict(self)
        d["acc"] = self.acc
        d["label"] = label
        return {k: ("" if d[k] is None else d[k]) for k in CSV_FIELDS}


def accuracy(d: float, eps_train: float) -> tuple[float, float]:
    """(Acc, Error) with Error = min(d, eps_train) / eps_train."""
    if d < 0:
        raise ValueError("distance must be non-negative")
    if eps_train <= 0:
        raise ValueError("eps_train must be positive")
    err = min(d, eps_train) / eps_train
    return 1.0 - err, err


def compute_metrics(summaries, eps_train: float = 0.10) -> MetricsReport:
    eps = [s if isinstance(s, EpisodeSummary) else EpisodeSummary.from_record(s) for s in summaries]
    if not eps:
        raise ValueError("need at least one episode")
    ok = [s for s in eps if s.outcome == "Success"]
    return MetricsReport(
        episodes=len(eps),
        sr=100.0 * len(ok) / len(eps),
        reach=100.0 * sum(s.reached for s in eps) / len(eps),
        exec_time=float(np.mean([s.steps for s in ok])) if ok else None,
        traj_len=float(np.mean([s.path_len for s in ok])) if ok else None,
        error=float(np.mean([accuracy(s.final_d, eps_train)[1] for s in eps])),
    )


def metrics_csv(rows) -> str:
    """``rows`` is an iterable of (label, MetricsReport)."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for label, rep in rows:
        w.writerow(rep.row(label))
    return buf.getvalue()


def summaries_from_log(lines) -> list[dict]:
    """Terminal records of a JSON-lines episode log, in file order."""
    out = []
    for ln in lines:
        if ln.strip():
            rec = json.loads(ln)
            if rec.get("type") == "terminal":
                out.append(rec)
    return out
