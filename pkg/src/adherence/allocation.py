"""Capacity-limited patient selection over a multi-epoch horizon.

Rewards ``a[i, t]`` (nonincreasing in ``t``) give the value of intervening on
patient ``i`` at epoch ``t``.  A plan assigns each patient to at most one
epoch and each epoch to at most ``c`` patients, maximising the total reward.
``greedy_allocate`` is the marginal-reward ranking policy; ``exact_allocate``
enumerates every feasible plan and serves as its optimality oracle.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rewards import InterventionParams, reward_matrix

MONOTONE_TOL = 1e-9
OBJECTIVE_TOL = 1e-9
MAX_EXACT_PLANS = 10**7


class AllocationError(ValueError):
    pass


@dataclass
class AllocationInstance:
    rewards: np.ndarray
    capacity: int
    ids: list[str] | None = None

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.rewards, dtype=float))
        if a.ndim != 2:
            raise AllocationError("rewards must be a patients x epochs matrix")
        if self.capacity < 0 or int(self.capacity) != self.capacity:
            raise AllocationError(f"capacity must be a non-negative integer, got {self.capacity}")
        if a.shape[1] > 1 and np.any(np.diff(a, axis=1) > MONOTONE_TOL):
            raise AllocationError("reward rows must be nonincreasing over epochs")
        self.rewards = a
        self.capacity = int(self.capacity)
        if self.ids is None:
            self.ids = [str(i) for i in range(a.shape[0])]
        elif len(self.ids) != a.shape[0]:
            raise AllocationError("ids length does not match the number of reward rows")

    @property
    def n(self) -> int:
        return self.rewards.shape[0]

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    def to_dict(self) -> dict:
        return {"rewards": self.rewards.tolist(), "capacity": self.capacity, "ids": list(self.ids)}

    @classmethod
    def from_dict(cls, d: dict) -> "AllocationInstance":
        return cls(np.asarray(d["rewards"], dtype=float), int(d["capacity"]), d.get("ids"))


@dataclass(frozen=True)
class SelectionPlan:
    """``assignments`` holds ``(patient_index, epoch)`` pairs with epochs counted from 1."""

    assignments: tuple[tuple[int, int], ...]
    objective: float

    def epoch_of(self, n: int) -> np.ndarray:
        out = np.zeros(n, dtype=int)
        for i, t in self.assignments:
            out[i] = t
        return out

    def to_dict(self) -> dict:
        return {"assignments": [list(x) for x in self.assignments], "objective": self.objective}


def _plan(assign: list[tuple[int, int]], a: np.ndarray) -> SelectionPlan:
    assign = tuple(sorted(assign))
    return SelectionPlan(assign, float(sum(a[i, t - 1] for i, t in assign)))


def select_top(score: np.ndarray, secondary: np.ndarray, id_rank: np.ndarray, pool: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` best pool members: by score, then secondary (both descending), then id."""
    idx = np.flatnonzero(pool)
    if k <= 0 or idx.size == 0:
        return np.zeros(0, dtype=int)
    order = np.lexsort((id_rank[idx], -secondary[idx], -score[idx]))
    return np.sort(idx[order[:k]])


def id_ranks(ids) -> np.ndarray:
    ids = list(ids)
    ranks = np.empty(len(ids), dtype=int)
    ranks[sorted(range(len(ids)), key=ids.__getitem__)] = np.arange(len(ids))
    return ranks


def epoch_scores(a: np.ndarray, t: int) -> np.ndarray:
    """Ranking score at 1-based epoch ``t``: marginal reward, or the reward itself at the last epoch."""
    T = a.shape[1]
    return a[:, t - 1] - a[:, t] if t < T else a[:, T - 1].copy()


def greedy_allocate(instance: AllocationInstance) -> SelectionPlan:
    a = instance.rewards
    ranks = id_ranks(instance.ids)
    remaining = np.ones(instance.n, dtype=bool)
    assign = []
    for t in range(1, instance.horizon + 1):
        chosen = select_top(epoch_scores(a, t), a[:, t - 1], ranks, remaining, instance.capacity)
        remaining[chosen] = False
        assign += [(int(i), t) for i in chosen]
    return _plan(assign, a)


def count_plans(n: int, T: int) -> int:
    return (T + 1) ** n


def exact_allocate(instance: AllocationInstance, max_plans: int = MAX_EXACT_PLANS) -> SelectionPlan:
    """Globally optimal plan by depth-first enumeration with capacity and bound pruning.

    Among optimal plans (within 1e-12) the one whose per-patient epoch vector
    is lexicographically smallest wins, with "not selected" ordered last.
    """
    n, T, c = instance.n, instance.horizon, instance.capacity
    if count_plans(n, T) > max_plans:
        raise AllocationError(
            f"{n} patients x {T} epochs gives {count_plans(n, T)} plans (limit {max_plans}); use greedy_allocate"
        )
    a = instance.rewards
    order = np.argsort(id_ranks(instance.ids), kind="stable")
    best_row = np.concatenate([np.maximum(a.max(axis=1), 0.0)[order], [0.0]]) if n else np.zeros(1)
    suffix = np.cumsum(best_row[::-1])[::-1]
    used = [0] * (T + 1)
    choice = [0] * n
    best = {"value": -np.inf, "choice": None}

    def key(ch):
        return tuple(T + 1 if e == 0 else e for e in ch)

    def visit(pos: int, value: float):
        if value + suffix[pos] < best["value"] - 1e-12:
            return
        if pos == n:
            if value > best["value"] + 1e-12 or (
                abs(value - best["value"]) <= 1e-12 and key(choice) < key(best["choice"])
            ):
                best["value"], best["choice"] = value, list(choice)
            return
        i = order[pos]
        for t in range(1, T + 1):
            if used[t] < c:
                used[t] += 1
                choice[pos] = t
                visit(pos + 1, value + a[i, t - 1])
                used[t] -= 1
        choice[pos] = 0
        visit(pos + 1, value)

    visit(0, 0.0)
    assign = [(int(order[p]), t) for p, t in enumerate(best["choice"]) if t > 0]
    return _plan(assign, a)


@dataclass
class PlanReport:
    ok: bool
    violations: list[str] = field(default_factory=list)
    details: list[str] = field(default_factory=list)


def validate_plan(instance: AllocationInstance, plan: SelectionPlan) -> PlanReport:
    """Check per-epoch capacity, single selection per patient and the stated objective."""
    violations, details = [], []
    counts: dict[int, int] = {}
    seen: dict[int, int] = {}
    total = 0.0
    for i, t in plan.assignments:
        if not (0 <= i < instance.n and 1 <= t <= instance.horizon):
            if "range" not in violations:
                violations.append("range")
            details.append(f"assignment ({i}, {t}) is outside the instance")
            continue
        counts[t] = counts.get(t, 0) + 1
        seen[i] = seen.get(i, 0) + 1
        total += instance.rewards[i, t - 1]
    over = {t: k for t, k in counts.items() if k > instance.capacity}
    if over:
        violations.append("capacity")
        details += [f"epoch {t} selects {k} > capacity {instance.capacity}" for t, k in sorted(over.items())]
    twice = {i: k for i, k in seen.items() if k > 1}
    if twice:
        violations.append("once_only")
        details += [f"patient {instance.ids[i]} selected {k} times" for i, k in sorted(twice.items())]
    if abs(total - plan.objective) > OBJECTIVE_TOL:
        violations.append("objective")
        details.append(f"objective {plan.objective} differs from reward sum {total}")
    return PlanReport(not violations, violations, details)


def write_plan_csv(path, instance: AllocationInstance, plan: SelectionPlan) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["patient_id", "epoch"])
        for i, t in plan.assignments:
            wr.writerow([instance.ids[i], t])


@dataclass
class CertificationReport:
    instances: int
    counterexamples: list[dict]
    seed: int

    @property
    def passed(self) -> bool:
        return not self.counterexamples

    def to_dict(self) -> dict:
        return {
            "instances": self.instances,
            "seed": self.seed,
            "n_counterexamples": len(self.counterexamples),
            "counterexamples": self.counterexamples,
        }


def random_instance(rng: np.random.Generator, n_max: int = 6, T_max: int = 3, c_max: int = 2):
    """Small instance with rewards produced by the reward model from random forecasts."""
    n = int(rng.integers(1, n_max + 1))
    T = int(rng.integers(1, T_max + 1))
    c = int(rng.integers(0, c_max + 1))
    y = rng.random((n, T))
    risk = rng.uniform(0.05, 0.5, n)
    params = InterventionParams(q=float(rng.uniform(0.7, 0.9)), r=float(rng.uniform(0.07, 0.12)))
    inst = AllocationInstance(reward_matrix(y, risk, params), c)
    return inst, {"y_hat": y.tolist(), "risk": risk.tolist(), "q": params.q, "r": params.r}


def certify(instances: int = 200, seed: int = 0, n_max: int = 6, T_max: int = 3, c_max: int = 2) -> CertificationReport:
    """Compare greedy and exact objectives on random small instances."""
    rng = np.random.default_rng(seed)
    found = []
    for k in range(instances):
        inst, inputs = random_instance(rng, n_max, T_max, c_max)
        g = greedy_allocate(inst)
        e = exact_allocate(inst)
        if e.objective - g.objective > OBJECTIVE_TOL:
            found.append(
                {
                    "instance_index": k,
                    "instance": inst.to_dict(),
                    "inputs": inputs,
                    "greedy": g.to_dict(),
                    "exact": e.to_dict(),
                    "gap": e.objective - g.objective,
                }
            )
    return CertificationReport(instances, found, seed)


def write_certification(path, report: CertificationReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1, allow_nan=False) + "\n")
