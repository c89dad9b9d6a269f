"""Closed-loop single-turn benchmark over both towns and all four conditions.

For every intersection exit a task drives from a start point just before the
intersection, through the labeled turn, to a goal just after it. Success means
reaching within 2 m of the goal before 1.5x the expert's reference time.
Results aggregate into the four-cell grid (training/new town) x (training/new
conditions).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import substream
from .simtown import (CONDITIONS, NEW_CONDITIONS, Route, TownMap,
                      TRAIN_CONDITIONS, run_episode)

SUCCESS_RADIUS = 2.0
TIME_FACTOR = 1.5
APPROACH_DISTANCE = 25.0


class BenchmarkError(RuntimeError):
    pass


@dataclass
class RouteTask:
    task_id: str
    town_kind: str
    route: Route
    command: str
    expert_time: float


@dataclass
class EpisodeResult:
    task_id: str
    condition: str
    success: bool
    termination: str
    elapsed: float


def _point_toward(q: np.ndarray, p: np.ndarray, dist: float) -> np.ndarray:
    """Point at `dist` from q along the q->p direction, capped inside the segment."""
    v = p - q
    length = float(np.linalg.norm(v))
    return q + v / length * min(dist, 0.6 * length)


def make_tasks(town: TownMap) -> list[RouteTask]:
    """One task per (intersection, labeled exit), approach fixed per town seed."""
    tasks = []
    for node in town.intersections():
        nbrs = town.adjacency[node]
        rng = substream(town.seed, "tasks", f"{town.kind}n{node}")
        approach = nbrs[int(rng.integers(len(nbrs)))]
        pv = town.nodes[node]
        start = _point_toward(pv, town.nodes[approach], APPROACH_DISTANCE)
        for exit_node in nbrs:
            if exit_node == approach:
                continue
            label = town.turn_label(approach, node, exit_node)
            if label is None:
                continue
            goal = _point_toward(pv, town.nodes[exit_node], APPROACH_DISTANCE)
            route = Route(np.array([start, pv, goal]), [(1, label)])
            task_id = f"{town.kind}-{node}-{exit_node}"
            ref = run_episode(town, route, CONDITIONS["noonClear"], seed=0,
                              policy=None, duration=60.0, cameras=(),
                              goal_radius=SUCCESS_RADIUS)
            if ref.termination != "goal":
                raise BenchmarkError(f"expert failed task {task_id}: "
                                     f"{ref.termination}")
            tasks.append(RouteTask(task_id, town.kind, route, label, ref.elapsed))
    return tasks


def run_task(policy, task: RouteTask, condition_name: str,
             seed: int) -> EpisodeResult:
    """Closed loop on the front camera; policy(front_image, command) -> steering."""
    condition = CONDITIONS[condition_name]
    budget = TIME_FACTOR * task.expert_time
    town_seed = int(substream(seed, "episode", task.task_id,
                              condition_name).integers(2 ** 31))
    try:
        log = run_episode(_task_town(task), task.route, condition,
                          seed=town_seed, policy=policy, duration=budget,
                          cameras=("front",), record_images=False,
                          goal_radius=SUCCESS_RADIUS)
    except ValueError as err:   # non-finite model output
        return EpisodeResult(task.task_id, condition_name, False,
                             f"error:{err}", 0.0)
    success = log.termination == "goal"
    return EpisodeResult(task.task_id, condition_name, success,
                         log.termination, log.elapsed)


_TOWN_CACHE: dict[tuple, TownMap] = {}


def _task_town(task: RouteTask) -> TownMap:
    # tasks reference their town by kind; benchmark towns use the town seed
    # stored at attach time (see attach_towns)
    town = getattr(task, "_town", None)
    if town is None:
        raise BenchmarkError(f"task {task.task_id} has no attached town")
    return town


def attach_towns(tasks: list[RouteTask], town: TownMap) -> list[RouteTask]:
    for t in tasks:
        t._town = town
    return tasks


def benchmark_tasks(town: TownMap) -> list[RouteTask]:
    return attach_towns(make_tasks(town), town)


@dataclass
class BenchmarkReport:
    model_name: str
    cells: dict   # (town_group, condition_group) -> {"tasks", "successes", "rate"}
    results: list

    def rate(self, town_group: str, condition_group: str) -> float:
        return self.cells[(town_group, condition_group)]["rate"]


TOWN_GROUPS = {"A": "training", "B": "new"}
CONDITION_GROUPS = {"training": TRAIN_CONDITIONS, "new": NEW_CONDITIONS}


def evaluate(policy, towns: dict[str, list[RouteTask]], seed: int = 0,
             model_name: str = "model") -> BenchmarkReport:
    """Run every task under all four conditions; aggregate the four cells."""
    cells = {}
    results = []
    for kind, tasks in towns.items():
        town_group = TOWN_GROUPS[kind]
        for cond_group, conds in CONDITION_GROUPS.items():
            key = (town_group, cond_group)
            cell = cells.setdefault(key, {"tasks": 0, "successes": 0, "rate": 0.0})
            for task in tasks:
                for cond in conds:
                    res = run_task(policy, task, cond, seed)
                    results.append(res)
                    cell["tasks"] += 1
                    cell["successes"] += int(res.success)
    for cell in cells.values():
        cell["rate"] = 100.0 * cell["successes"] / max(cell["tasks"], 1)
    return BenchmarkReport(model_name, cells, results)


def write_report_csv(report: BenchmarkReport, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "town", "condition_group",
                         "tasks", "successes", "rate"])
        for (town_group, cond_group), cell in sorted(report.cells.items()):
            writer.writerow([report.model_name, town_group, cond_group,
                             cell["tasks"], cell["successes"],
                             f"{cell['rate']:.2f}"])


def evaluate_expert(towns: dict[str, list[RouteTask]],
                    model_name: str = "expert") -> BenchmarkReport:
    """Four-cell report for the expert autopilot (upper-bound oracle)."""
    cells = {}
    results = []
    for kind, tasks in towns.items():
        town_group = TOWN_GROUPS[kind]
        for cond_group, conds in CONDITION_GROUPS.items():
            key = (town_group, cond_group)
            cell = cells.setdefault(key, {"tasks": 0, "successes": 0, "rate": 0.0})
            for task in tasks:
                for cond in conds:
                    log = run_episode(_task_town(task), task.route,
                                      CONDITIONS[cond], seed=1, policy=None,
                                      duration=TIME_FACTOR * task.expert_time,
                                      cameras=(), goal_radius=SUCCESS_RADIUS)
                    ok = log.termination == "goal"
                    results.append(EpisodeResult(task.task_id, cond, ok,
                                                 log.termination, log.elapsed))
                    cell["tasks"] += 1
                    cell["successes"] += int(ok)
    for cell in cells.values():
        cell["rate"] = 100.0 * cell["successes"] / max(cell["tasks"], 1)
    return BenchmarkReport(model_name, cells, results)


def run_expert_reference(tasks: list[RouteTask],
                         conditions=TRAIN_CONDITIONS + NEW_CONDITIONS) -> float:
    """Expert success rate over tasks x conditions (sanity oracle, in %)."""
    total, ok = 0, 0
    for task in tasks:
        for cond in conditions:
            log = run_episode(_task_town(task), task.route, CONDITIONS[cond],
                              seed=1, policy=None,
                              duration=TIME_FACTOR * task.expert_time,
                              cameras=(), goal_radius=SUCCESS_RADIUS)
            total += 1
            ok += int(log.termination == "goal")
    return 100.0 * ok / max(total, 1)
