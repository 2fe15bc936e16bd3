"""Task registry: scene descriptions as plain JSON-able dicts.

A task file holds particle-blob primitives, the hand's initial pose, the
horizon, and the control rate. Scenes are built deterministically from
(task, seed).
"""

from __future__ import annotations

import copy
import json

import numpy as np

from .mpm.hand import HandSpec
from .mpm.sim import HandState, Material, ParticleState, SimConfig, SimState


class UnknownTaskError(KeyError):
    pass


_DOUGH = {
    "kind": "box",
    "center": [0.5, 0.14],
    "size": [0.24, 0.08],
    "count": 450,
    "material": {"youngs": 5e3, "poisson": 0.2, "yield_stress": 50.0,
                 "density": 1.0},
}

_HAND_GEOM = {
    "link_lengths": [0.08, 0.08, 0.08],
    "link_radii": [0.018, 0.018, 0.018],
    "friction": 0.9,
}


def _task(name, hand_base, hand_joints=(0.0, 0.0, 0.0), horizon=120):
    return {
        "name": name,
        "horizon": horizon,
        "control_hz": 20,
        "grid_res": 64,
        "ground_height": 0.1,
        "blobs": [copy.deepcopy(_DOUGH)],
        "hand": {
            "base": list(hand_base),
            "joints": list(hand_joints),
            **copy.deepcopy(_HAND_GEOM),
        },
    }


TASKS = {
    # finger hangs beside/above the dough, pointing straight down
    "fold2d_left": _task("fold2d_left", (0.68, 0.40, -np.pi / 2)),
    "fold2d_right": _task("fold2d_right", (0.32, 0.40, -np.pi / 2)),
    # horizontal bar above the dough
    "press2d": _task("press2d", (0.38, 0.30, 0.0)),
    "pinch2d": _task("pinch2d", (0.56, 0.40, -np.pi / 2)),
}


def canonical_task_id(name):
    return str(name).strip().lower().replace("-", "_")


def get_task(name):
    tid = canonical_task_id(name)
    if tid not in TASKS:
        raise UnknownTaskError(
            f"unknown task {name!r}; known: {sorted(TASKS)}"
        )
    return copy.deepcopy(TASKS[tid])


def load_task(path):
    """Read a task description from a JSON file."""
    with open(path) as fh:
        task = json.load(fh)
    for key in ("name", "horizon", "blobs", "hand"):
        if key not in task:
            raise ValueError(f"task file missing {key!r}")
    return task


def sample_blob(blob, rng):
    """Uniform particle positions inside a box or ball primitive."""
    count = int(blob["count"])
    center = np.asarray(blob["center"], dtype=np.float64)
    if blob["kind"] == "box":
        size = np.asarray(blob["size"], dtype=np.float64)
        pts = center + (rng.random((count, 2)) - 0.5) * size
        area = float(size[0] * size[1])
    elif blob["kind"] == "ball":
        radius = float(blob["size"][0]) / 2.0
        angles = rng.random(count) * 2 * np.pi
        rr = radius * np.sqrt(rng.random(count))
        pts = center + np.stack([rr * np.cos(angles), rr * np.sin(angles)], axis=1)
        area = float(np.pi * radius**2)
    else:
        raise ValueError(f"unknown blob kind {blob['kind']!r}")
    return pts, area


def hand_spec_from_task(task):
    h = task["hand"]
    return HandSpec(
        link_lengths=np.asarray(h["link_lengths"], dtype=np.float64),
        link_radii=np.asarray(h["link_radii"], dtype=np.float64),
        friction=float(h.get("friction", 0.9)),
    )


def build_scene(task, seed):
    """Deterministic SimState from a task description and a scene seed."""
    if isinstance(task, str):
        task = get_task(task)
    rng = np.random.default_rng(int(seed))
    all_pts = []
    all_area = 0.0
    mats = []
    for blob in task["blobs"]:
        pts, area = sample_blob(blob, rng)
        all_pts.append(pts)
        all_area += area
        mats.append((Material(**blob["material"]), len(pts)))
    pts = np.vstack(all_pts)
    particles = ParticleState.from_positions(pts, all_area)
    # per-blob materials
    i = 0
    for mat, cnt in mats:
        sl = slice(i, i + cnt)
        particles.mu[sl] = mat.mu
        particles.lam[sl] = mat.lam
        particles.yield_stress[sl] = mat.yield_stress
        particles.mass[sl] = particles.vol0[sl] * mat.density
        i += cnt
    spec = hand_spec_from_task(task)
    dofs = np.array(list(task["hand"]["base"]) + list(task["hand"]["joints"]),
                    dtype=np.float64)
    return SimState(particles, HandState(spec, dofs))


def sim_config_from_task(task):
    return SimConfig(
        grid_res=int(task.get("grid_res", 64)),
        ground_height=float(task.get("ground_height", 0.1)),
    )
