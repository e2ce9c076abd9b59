"""Dynamic two-loss weighting.

Each task's loss is tracked by an exponential moving average
k = alpha * L + (1 - alpha) * k_prev, turned into a loss-reduction
probability p = min(k, k_prev) / k_prev, and weighted by the focal measure
FL(p, gamma) = -(1 - p)^gamma * log(p). FL(1) is exactly 0, so a task whose
loss has stopped falling loses its weight. The phase rule compares
FL_tp / FL_id against the switch ratio: below it the trainer runs an
ID-only iteration on a random batch, otherwise a combined iteration on an
ID-balanced batch.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

P_FLOOR = 1e-12

# A loss at (numerically) zero cannot reduce further; its reduction
# probability is pinned to 1 so the focal weight releases the task.
# Without this, an exactly-zero loss stream decays the EMA geometrically
# and p sticks at 1 - alpha forever.
ZERO_LOSS_EPS = 1e-12

TRACE_COLUMNS = ("tau", "phase", "L_id", "L_tp", "k_id", "k_tp",
                 "p_id", "p_tp", "FL_id", "FL_tp", "lr")


class Phase(str, enum.Enum):
    ID_ONLY = "id_only"
    COMBINED = "combined"

    def __str__(self):
        return self.value


def update_ema(k_prev: float, loss: float, alpha: float) -> float:
    """k = alpha * L + (1 - alpha) * k_prev."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"discount alpha must be in [0, 1], got {alpha}")
    return alpha * loss + (1.0 - alpha) * k_prev


def loss_reduction_prob(k: float, k_prev: float) -> float:
    """p = min(k, k_prev) / k_prev, clamped to [P_FLOOR, 1]."""
    if k_prev <= 0.0:
        raise ValueError(f"loss_reduction_prob: k_prev must be positive, got {k_prev}")
    p = min(k, k_prev) / k_prev
    return min(1.0, max(P_FLOOR, p))


def focal_weight(p: float, gamma: float) -> float:
    """FL(p, gamma) = -(1 - p)^gamma * log(p); exactly 0 at p = 1."""
    if gamma < 0:
        raise ValueError(f"focal_weight: gamma must be >= 0, got {gamma}")
    p = min(1.0, max(P_FLOOR, p))
    if p == 1.0:
        return 0.0
    return -((1.0 - p) ** gamma) * math.log(p)


def select_phase(fl_id: float, fl_tp: float, switch_ratio: float,
                 previous: Phase) -> Phase:
    """ID-only iff FL_tp / FL_id < switch_ratio; a zero FL_id with positive
    FL_tp forces combined; both zero keeps the previous phase."""
    if fl_id < 0 or fl_tp < 0:
        raise ValueError(f"select_phase: weights must be >= 0, got {fl_id}, {fl_tp}")
    if fl_id == 0.0:
        return previous if fl_tp == 0.0 else Phase.COMBINED
    return Phase.ID_ONLY if fl_tp / fl_id < switch_ratio else Phase.COMBINED


def combined_objective(loss_id, loss_tp, fl_id: float, fl_tp: float):
    """FL_id * L_id + FL_tp * L_tp with the weights as constants.

    Works on floats and on autograd Tensors (no gradient flows through the
    weights either way).
    """
    return fl_id * loss_id + fl_tp * loss_tp


@dataclass
class TaskStats:
    """EMA state of one task. k is None until the first observed loss."""
    k_prev: float | None = None
    k: float | None = None
    p: float = 1.0

    def observe(self, loss: float, alpha: float) -> None:
        if self.k is None:
            self.k_prev = loss  # first call seeds the average with L_0
        else:
            self.k_prev = self.k
        self.k = update_ema(self.k_prev, loss, alpha)
        if loss <= ZERO_LOSS_EPS or self.k_prev <= 0:
            self.p = 1.0
        else:
            self.p = loss_reduction_prob(self.k, self.k_prev)


@dataclass
class SchedulerState:
    """Per-iteration phase selection and EMA bookkeeping for both tasks."""
    alpha: float = 0.25
    gamma: float = 2.0
    switch_ratio: float = 0.16
    tau: int = 0
    phase: Phase = Phase.ID_ONLY
    id_stats: TaskStats = field(default_factory=lambda: TaskStats(p=P_FLOOR))
    tp_stats: TaskStats = field(default_factory=lambda: TaskStats(p=1.0))
    fl_id: float = 0.0
    fl_tp: float = 0.0

    def begin_iteration(self) -> Phase:
        """Advance the counter, recompute the focal weights from the previous
        iteration's probabilities, and pick the phase."""
        self.tau += 1
        self.fl_id = focal_weight(self.id_stats.p, self.gamma)
        self.fl_tp = focal_weight(self.tp_stats.p, self.gamma)
        self.phase = select_phase(self.fl_id, self.fl_tp, self.switch_ratio, self.phase)
        return self.phase

    def observe(self, task: str, loss: float) -> None:
        stats = self.id_stats if task == "id" else self.tp_stats
        stats.observe(loss, self.alpha)

    # -- checkpoint support --------------------------------------------------

    def to_scalars(self) -> dict:
        enc = lambda v: float("nan") if v is None else float(v)
        return {
            "alpha": self.alpha, "gamma": self.gamma, "switch_ratio": self.switch_ratio,
            "tau": float(self.tau), "phase": float(self.phase == Phase.COMBINED),
            "k_prev_id": enc(self.id_stats.k_prev), "k_id": enc(self.id_stats.k),
            "p_id": self.id_stats.p,
            "k_prev_tp": enc(self.tp_stats.k_prev), "k_tp": enc(self.tp_stats.k),
            "p_tp": self.tp_stats.p,
            "fl_id": self.fl_id, "fl_tp": self.fl_tp,
        }

    @classmethod
    def from_scalars(cls, s: dict) -> "SchedulerState":
        dec = lambda v: None if math.isnan(v) else float(v)
        state = cls(alpha=s["alpha"], gamma=s["gamma"], switch_ratio=s["switch_ratio"])
        state.tau = int(s["tau"])
        state.phase = Phase.COMBINED if s["phase"] == 1.0 else Phase.ID_ONLY
        state.id_stats = TaskStats(dec(s["k_prev_id"]), dec(s["k_id"]), s["p_id"])
        state.tp_stats = TaskStats(dec(s["k_prev_tp"]), dec(s["k_tp"]), s["p_tp"])
        state.fl_id = s["fl_id"]
        state.fl_tp = s["fl_tp"]
        return state


class TraceWriter:
    """Appends one CSV row per training iteration."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._fh.write(",".join(TRACE_COLUMNS) + "\n")

    def write(self, tau: int, phase: Phase, loss_id: float, loss_tp,
              state: SchedulerState, lr: float) -> None:
        fmt = lambda v: "" if v is None else repr(float(v))
        stats_i, stats_t = state.id_stats, state.tp_stats
        row = [str(tau), str(phase), fmt(loss_id), fmt(loss_tp),
               fmt(stats_i.k), fmt(stats_t.k), fmt(stats_i.p), fmt(stats_t.p),
               fmt(state.fl_id), fmt(state.fl_tp), fmt(lr)]
        self._fh.write(",".join(row) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
