"""Deterministic gridworld: a gripper, colored objects, walls, one goal cell.

Cells are indexed ``cell = y * width + x``. Action values match the action
vocab slice order so ``layout.action[0] + int(act)`` is the token id (pinned
by a test).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from enum import IntEnum

from ..blockcodec.vocab import GRID_H, GRID_W, VocabLayout


class Act(IntEnum):
    NOOP = 0
    LEFT = 1
    RIGHT = 2
    UP = 3
    DOWN = 4
    GRIP = 5
    RELEASE = 6


_DELTAS = {Act.LEFT: (-1, 0), Act.RIGHT: (1, 0), Act.UP: (0, -1), Act.DOWN: (0, 1)}
# tie-break priority for equally short paths
_MOVE_ORDER = (Act.UP, Act.DOWN, Act.LEFT, Act.RIGHT)


class UnreachableGoal(RuntimeError):
    """BFS found no path; the episode is inadmissible for manipulation."""


@dataclass(frozen=True)
class Obj:
    cell: int | None  # None while held
    color: int


@dataclass(frozen=True)
class WorldState:
    width: int
    height: int
    objects: dict[int, Obj]
    gripper: int
    held: int | None
    walls: frozenset[int]
    goal: int | None  # None when the script provides no valid target cell

    def xy(self, cell: int) -> tuple[int, int]:
        return cell % self.width, cell // self.width

    def cell(self, x: int, y: int) -> int:
        return y * self.width + x

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def object_at(self, cell: int) -> int | None:
        for oid, obj in self.objects.items():
            if obj.cell == cell:
                return oid
        return None

    def to_dict(self) -> dict:
        return {
            "gripper": self.gripper,
            "held": self.held,
            "goal": self.goal,
            "objects": {str(k): [self.objects[k].cell, self.objects[k].color]
                        for k in sorted(self.objects)},
            "walls": sorted(self.walls),
        }


def step(state: WorldState, action: Act) -> tuple[WorldState, str | None]:
    """Apply one action; illegal moves are no-ops with a note, never errors."""
    action = Act(action)
    if action == Act.NOOP:
        return state, None
    if action in _DELTAS:
        dx, dy = _DELTAS[action]
        x, y = state.xy(state.gripper)
        nx, ny = x + dx, y + dy
        if not state.in_bounds(nx, ny) or state.cell(nx, ny) in state.walls:
            return state, "blocked"
        return replace(state, gripper=state.cell(nx, ny)), None
    if action == Act.GRIP:
        if state.held is not None:
            return state, "grip-while-holding"
        oid = state.object_at(state.gripper)
        if oid is None:
            return state, "grip-empty"
        objects = dict(state.objects)
        objects[oid] = replace(objects[oid], cell=None)
        return replace(state, objects=objects, held=oid), None
    if action == Act.RELEASE:
        if state.held is None:
            return state, "release-empty"
        if state.object_at(state.gripper) is not None:
            return state, "release-occupied"
        objects = dict(state.objects)
        objects[state.held] = replace(objects[state.held], cell=state.gripper)
        return replace(state, objects=objects, held=None), None
    raise ValueError(f"unknown action {action}")


def observe_image(state: WorldState, layout: VocabLayout) -> list[int]:
    """Four image tokens: gripper cell, held flag, nearest object, goal cell."""
    nearest: tuple | None = None
    gx, gy = state.xy(state.gripper)
    for oid in sorted(state.objects):
        obj = state.objects[oid]
        if obj.cell is None:
            continue
        ox, oy = state.xy(obj.cell)
        key = (abs(ox - gx) + abs(oy - gy), obj.cell, oid)
        if nearest is None or key < nearest[0]:
            nearest = (key, obj)
    obj_tok = (layout.img_obj_tok(None) if nearest is None
               else layout.img_obj_tok(nearest[1].cell, nearest[1].color))
    return [layout.img_grip_tok(state.gripper),
            layout.img_held_tok(state.held is not None),
            obj_tok,
            layout.img_goal_tok(state.goal)]


def bfs_distances(state: WorldState, target: int) -> list[float]:
    dist = [float("inf")] * (state.width * state.height)
    if target in state.walls:
        return dist
    dist[target] = 0
    queue = deque([target])
    while queue:
        cell = queue.popleft()
        x, y = state.xy(cell)
        for act in _MOVE_ORDER:
            dx, dy = _DELTAS[act]
            nx, ny = x + dx, y + dy
            if not state.in_bounds(nx, ny):
                continue
            ncell = state.cell(nx, ny)
            if ncell in state.walls or dist[ncell] != float("inf"):
                continue
            dist[ncell] = dist[cell] + 1
            queue.append(ncell)
    return dist


def _move_toward(state: WorldState, target: int) -> Act:
    dist = bfs_distances(state, target)
    here = dist[state.gripper]
    if here == float("inf"):
        raise UnreachableGoal(f"no path from cell {state.gripper} to {target}")
    x, y = state.xy(state.gripper)
    for act in _MOVE_ORDER:
        dx, dy = _DELTAS[act]
        nx, ny = x + dx, y + dy
        if not state.in_bounds(nx, ny):
            continue
        ncell = state.cell(nx, ny)
        if ncell not in state.walls and dist[ncell] == here - 1:
            return act
    raise UnreachableGoal(f"inconsistent BFS field around cell {state.gripper}")


def oracle_policy(state: WorldState, goal: tuple[int, int]) -> Act:
    """Next ground-truth action for `move object to cell': BFS to the object,
    GRIP, BFS to the goal cell, RELEASE, then NOOP forever."""
    target_obj, goal_cell = goal
    obj = state.objects[target_obj]
    if state.held == target_obj:
        if state.gripper == goal_cell:
            return Act.RELEASE
        return _move_toward(state, goal_cell)
    if obj.cell == goal_cell:
        return Act.NOOP  # satisfied
    if state.held is not None:
        return Act.NOOP  # defensive: scripts never hold a non-target
    if state.gripper == obj.cell:
        return Act.GRIP
    return _move_toward(state, obj.cell)


def goal_satisfied(state: WorldState, goal: tuple[int, int]) -> bool:
    target_obj, goal_cell = goal
    return state.objects[target_obj].cell == goal_cell
