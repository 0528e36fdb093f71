"""Discrete-event replay of build tasks on a memory-constrained node fleet.

Queued tasks are matched FIFO first-fit on memory whenever capacity changes.
A task whose assignment is below its true peak is killed by the OOM handler
``oom_fraction`` of the way through its run. Under the ``refined`` policy the
first restart keeps the refined requirement and the second (last) restart
uses the baseline requirement; under ``baseline`` every attempt uses the
baseline. At most three executions per task.
"""
from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MAX_ATTEMPT = 2
DEFAULT_OOM_FRACTION = 0.7
_EPS = 1e-9

# same-time ordering: capacity is released before new work arrives
_FINISH, _OOM, _SUBMIT = 0, 1, 2


@dataclass(frozen=True)
class SimNode:
    node_id: str
    memory_capacity_gb: float
    cpu_capacity: float = 64.0

    def __post_init__(self):
        if not (self.memory_capacity_gb > 0 and self.cpu_capacity > 0):
            raise ValueError("node capacities must be > 0")


@dataclass(frozen=True)
class SimTask:
    task_id: str
    submit_time: float
    duration: float
    true_peak_gb: float
    baseline_gb: float
    refined_gb: float | None = None

    def assigned(self, attempt: int, policy: str) -> float:
        if policy == "baseline" or self.refined_gb is None or attempt >= MAX_ATTEMPT:
            return self.baseline_gb
        return self.refined_gb


@dataclass
class SimResult:
    policy: str
    tasks: list
    aggregates: dict
    events: list = field(default_factory=list, repr=False)

    def to_dict(self, with_events: bool = False) -> dict:
        d = {"policy": self.policy, "aggregates": self.aggregates, "tasks": self.tasks}
        if with_events:
            d["events"] = [list(e) for e in self.events]
        return d


class UnschedulableTask(Exception):
    pass


def run(
    tasks: Sequence[SimTask],
    nodes: Sequence[SimNode],
    policy: str = "refined",
    oom_fraction: float = DEFAULT_OOM_FRACTION,
    record_events: bool = True,
) -> SimResult:
    if policy not in ("baseline", "refined"):
        raise ValueError(f"unknown policy {policy!r}")
    if not nodes:
        raise ValueError("node fleet is empty")
    if not 0.0 < oom_fraction <= 1.0:
        raise ValueError("oom_fraction must lie in (0, 1]")

    n = len(tasks)
    cap = np.array([nd.memory_capacity_gb for nd in nodes], dtype=float)
    free = cap.copy()
    max_cap = float(cap.max())
    min_assign = min((min(t.baseline_gb, t.assigned(0, policy)) for t in tasks), default=0.0)

    attempt = [0] * n
    state = ["queued"] * n
    history = [[] for _ in range(n)]
    wait = [0.0] * n
    runtime = [0.0] * n
    enqueued = [0.0] * n
    oom_count = [0] * n
    placed_on = [-1] * n
    wasted = 0.0
    gbh = 0.0
    events = []
    heap = []
    seq = 0
    for i, t in enumerate(tasks):
        heapq.heappush(heap, (t.submit_time, _SUBMIT, seq, i))
        seq += 1
    queue: list[int] = []
    now = 0.0
    first_submit = tasks[0].submit_time if tasks else 0.0
    makespan_end = first_submit

    def log(kind, i, node=-1, gb=None):
        if record_events:
            events.append((now, kind, tasks[i].task_id, attempt[i], nodes[node].node_id if node >= 0 else "", gb))

    def dispatch():
        nonlocal seq, queue
        if not queue:
            return
        remaining = []
        max_free = float(free.max())
        for k, i in enumerate(queue):
            if max_free + _EPS < min_assign:
                remaining.extend(queue[k:])
                break
            a = tasks[i].assigned(attempt[i], policy)
            if a > max_free + _EPS:
                remaining.append(i)
                continue
            j = int(np.argmax(free + _EPS >= a))
            free[j] -= a
            if free[j] < -_EPS * max(1.0, cap[j]):
                raise AssertionError("node capacity exceeded")
            max_free = float(free.max())
            state[i] = "running"
            wait[i] += now - enqueued[i]
            history[i].append(a)
            placed_on[i] = j
            log("start", i, j, a)
            t = tasks[i]
            if a < t.true_peak_gb:
                heapq.heappush(heap, (now + t.duration * oom_fraction, _OOM, seq, i))
            else:
                heapq.heappush(heap, (now + t.duration, _FINISH, seq, i))
            seq += 1
        queue = remaining

    while heap:
        now, kind, _, i = heapq.heappop(heap)
        t = tasks[i]
        if kind == _SUBMIT:
            if t.baseline_gb > max_cap + _EPS or t.assigned(0, policy) > max_cap + _EPS:
                state[i] = "unschedulable"
                log("unschedulable", i)
            else:
                enqueued[i] = now
                queue.append(i)
                log("submit", i)
        else:
            j = placed_on[i]
            a = history[i][-1]
            free[j] += a
            if free[j] > cap[j]:
                free[j] = cap[j]
            if kind == _FINISH:
                runtime[i] += t.duration
                gbh += a * t.duration / 3600.0
                state[i] = "finished"
                log("finish", i, j, a)
            else:
                spent = t.duration * oom_fraction
                runtime[i] += spent
                wasted += spent
                gbh += a * spent / 3600.0
                oom_count[i] += 1
                log("oom", i, j, a)
                if attempt[i] < MAX_ATTEMPT:
                    attempt[i] += 1
                    enqueued[i] = now
                    state[i] = "queued"
                    queue.append(i)
                else:
                    state[i] = "exhausted"
                    log("exhausted", i)
            makespan_end = max(makespan_end, now)
        dispatch()

    per_task = [
        {
            "task_id": tasks[i].task_id,
            "attempts": len(history[i]),
            "total_wait": wait[i],
            "total_runtime": runtime[i],
            "final_state": state[i],
            "assigned_history": history[i],
            "oom_events": oom_count[i],
        }
        for i in range(n)
    ]
    waits = np.array(wait) if n else np.zeros(1)
    finished = sum(s == "finished" for s in state)
    makespan = makespan_end - first_submit
    final_assigned = [h[-1] for h in history if h]
    aggregates = {
        "n_tasks": n,
        "finished": finished,
        "exhausted": sum(s == "exhausted" for s in state),
        "unschedulable": sum(s == "unschedulable" for s in state),
        "executions": sum(len(h) for h in history),
        "makespan_s": makespan,
        "throughput_per_h": finished / (makespan / 3600.0) if makespan > 0 else float(finished),
        "mean_wait_s": float(waits.mean()),
        "p95_wait_s": float(np.percentile(waits, 95)),
        "oom_events": int(sum(oom_count)),
        "oom_rate": (sum(c > 0 for c in oom_count) / n) if n else 0.0,
        "wasted_work_hours": wasted / 3600.0,
        "assigned_gbh": gbh,
        "mean_final_assigned_gb": float(np.mean(final_assigned)) if final_assigned else 0.0,
    }
    return SimResult(policy, per_task, aggregates, events)


def compare(tasks, nodes, oom_fraction: float = DEFAULT_OOM_FRACTION, record_events: bool = True) -> dict:
    """Replay the same tasks on the same fleet under both policies."""
    base = run(tasks, nodes, "baseline", oom_fraction, record_events)
    ref = run(tasks, nodes, "refined", oom_fraction, record_events)
    savings = [
        t.baseline_gb - r["assigned_history"][-1]
        for t, r in zip(tasks, ref.tasks) if r["assigned_history"]
    ]
    ba, ra = base.aggregates, ref.aggregates
    delta = {
        "mean_wait_change_s": ra["mean_wait_s"] - ba["mean_wait_s"],
        "p95_wait_change_s": ra["p95_wait_s"] - ba["p95_wait_s"],
        "oom_rate_change": ra["oom_rate"] - ba["oom_rate"],
        "oom_events_change": ra["oom_events"] - ba["oom_events"],
        "makespan_ratio": (ra["makespan_s"] / ba["makespan_s"]) if ba["makespan_s"] > 0 else 1.0,
        "realized_mean_savings_gb": float(np.mean(savings)) if savings else 0.0,
        "realized_gbh_savings": ba["assigned_gbh"] - ra["assigned_gbh"],
    }
    return {"baseline": base, "refined": ref, "delta": delta}


def sample_durations(n: int, seed: int = 0, median_s: float = 1800.0, sigma: float = 0.5) -> np.ndarray:
    return np.random.default_rng(seed).lognormal(math.log(median_s), sigma, size=n)


def tasks_from_records(records, decisions=None, *, seed: int = 0, median_s: float = 1800.0, sigma: float = 0.5):
    """Sim tasks from trace records and (optionally) refinement decisions.

    Returns ``(tasks, synthetic_durations)``; records without a duration get one
    sampled from a lognormal distribution and the flag is set.
    """
    records = list(records)
    durs = np.array([np.nan if r.duration_s is None else r.duration_s for r in records], dtype=float)
    missing = ~(durs > 0)
    synthetic = bool(missing.any())
    if synthetic:
        durs[missing] = sample_durations(int(missing.sum()), seed, median_s, sigma)
    tasks = []
    for k, r in enumerate(records):
        refined = None if decisions is None else decisions[k].final_gb
        tid = decisions[k].task_id if decisions is not None and decisions[k].task_id else f"task-{k}"
        tasks.append(SimTask(tid, r.time, float(durs[k]), r.max_rss_gb, r.baseline_assigned_gb, refined))
    tasks.sort(key=lambda t: t.submit_time)
    return tasks, synthetic


def peak_demand(tasks: Sequence[SimTask]) -> float:
    """Peak concurrent baseline memory if every task started at submission."""
    deltas = []
    for t in tasks:
        deltas.append((t.submit_time, 1, t.baseline_gb))
        deltas.append((t.submit_time + t.duration, 0, -t.baseline_gb))
    deltas.sort()
    cur = peak = 0.0
    for _, _, d in deltas:
        cur += d
        peak = max(peak, cur)
    return peak


def synthesize_fleet(tasks, node_memory_gb: float = 512.0, cpu_capacity: float = 64.0,
                     target_utilization: float = 0.8) -> list[SimNode]:
    """Homogeneous fleet sized so the baseline peak demand fills ~target_utilization."""
    cap = max(node_memory_gb, max((t.baseline_gb for t in tasks), default=node_memory_gb))
    count = max(1, math.ceil(peak_demand(tasks) / (target_utilization * cap)))
    return [SimNode(f"node-{k:04d}", cap, cpu_capacity) for k in range(count)]


def fleet_from_scenario(scenario: dict, tasks) -> list[SimNode]:
    spec = scenario.get("nodes", "auto")
    if spec == "auto" or spec is None:
        return synthesize_fleet(
            tasks,
            scenario.get("node_memory_gb", 512.0),
            scenario.get("cpu_capacity", 64.0),
            scenario.get("target_utilization", 0.8),
        )
    if isinstance(spec, dict):
        return [
            SimNode(f"node-{k:04d}", float(spec["memory_capacity_gb"]), float(spec.get("cpu_capacity", 64.0)))
            for k in range(int(spec["count"]))
        ]
    return [
        SimNode(str(d.get("node_id", f"node-{k:04d}")), float(d["memory_capacity_gb"]), float(d.get("cpu_capacity", 64.0)))
        for k, d in enumerate(spec)
    ]


EVENT_HEADER = ("time", "event", "task_id", "attempt", "node_id", "assigned_gb")


def write_events(result: SimResult, path) -> int:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        for e in result.events:
            w.writerow([repr(e[0]), e[1], e[2], e[3], e[4], "" if e[5] is None else repr(e[5])])
    return len(result.events)
