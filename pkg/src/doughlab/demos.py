"""Scripted demonstration generator: keyframed hand schedules with seeded
jitter stand in for human teleoperation.

Each task has a hand-tuned keyframe schedule (time fraction -> dof target).
Targets are tracked with clamped actions, so every recorded action obeys the
per-dof bound exactly and every demo replays bit-exactly from (task, seed,
actions).
"""

from __future__ import annotations

import numpy as np

from . import store, tasks
from .mpm.sim import SimulationDiverged, rollout

# keyframes: (time fraction, [bx, by, phi, q1, q2, q3])
_PI = np.pi

_SCHEDULES = {
    "fold2d_left": [
        (0.00, [0.68, 0.40, -_PI / 2, 0.0, 0.0, 0.0]),
        (0.18, [0.68, 0.345, -_PI / 2, 0.0, 0.0, 0.0]),   # descend at right edge
        (0.62, [0.47, 0.345, -_PI / 2, -0.55, -0.55, -0.45]),  # sweep + curl left
        (0.85, [0.44, 0.40, -_PI / 2, -0.75, -0.65, -0.55]),   # lift, keep curl
        (1.00, [0.46, 0.44, -_PI / 2, -0.75, -0.65, -0.55]),
    ],
    "press2d": [
        (0.00, [0.38, 0.30, 0.0, 0.0, 0.0, 0.0]),
        (0.15, [0.38, 0.235, 0.0, 0.0, 0.0, 0.0]),  # approach
        (0.55, [0.38, 0.168, 0.0, 0.0, 0.0, 0.0]),  # press
        (0.72, [0.38, 0.168, 0.0, 0.0, 0.0, 0.0]),  # hold
        (1.00, [0.38, 0.30, 0.0, 0.0, 0.0, 0.0]),   # release
    ],
    "pinch2d": [
        (0.00, [0.56, 0.40, -_PI / 2, 0.0, 0.0, 0.0]),
        (0.25, [0.56, 0.365, -_PI / 2, 0.0, 0.0, 0.0]),  # poke into the top
        (0.50, [0.53, 0.355, -_PI / 2, -0.35, -0.3, -0.25]),  # drag a dent
        (0.75, [0.53, 0.42, -_PI / 2, -0.35, -0.3, -0.25]),   # withdraw
        (1.00, [0.56, 0.44, -_PI / 2, 0.0, 0.0, 0.0]),
    ],
}


def _mirror_keyframes(frames):
    """Reflect a schedule across the vertical axis through x = 0.5."""
    out = []
    for t, dofs in frames:
        bx, by, phi, *qs = dofs
        out.append((t, [1.0 - bx, by, -_PI - phi, *[-q for q in qs]]))
    return out


_SCHEDULES["fold2d_right"] = _mirror_keyframes(_SCHEDULES["fold2d_left"])


def _jitter_schedule(frames, rng, xy_amp=0.008, time_amp=0.04, joint_amp=0.05):
    """Small seeded perturbations so demos vary like human attempts."""
    dx = rng.uniform(-xy_amp, xy_amp)
    dy = rng.uniform(-xy_amp / 2, xy_amp / 2)
    stretch = 1.0 + rng.uniform(-time_amp, time_amp)
    jscale = 1.0 + rng.uniform(-joint_amp, joint_amp)
    out = []
    for i, (t, dofs) in enumerate(frames):
        bx, by, phi, *qs = dofs
        tt = min(1.0, t * stretch) if 0.0 < t < 1.0 else t
        out.append((tt, [bx + dx, by + dy, phi, *[q * jscale for q in qs]]))
    out.sort(key=lambda f: f[0])
    return out


def schedule_targets(frames, horizon):
    """Piecewise-linear dof targets for control steps 0..horizon."""
    times = np.array([f[0] for f in frames])
    values = np.array([f[1] for f in frames])
    ts = np.linspace(0.0, 1.0, horizon + 1)
    out = np.empty((horizon + 1, values.shape[1]))
    for d in range(values.shape[1]):
        out[:, d] = np.interp(ts, times, values[:, d])
    return out


def track_targets(state0, targets, cfg):
    """Actions that track dof targets under the per-dof bound."""
    spec = state0.hand.spec
    actions = np.zeros((targets.shape[0] - 1, spec.n_dofs))
    dofs = state0.hand.dofs.copy()
    for t in range(actions.shape[0]):
        raw = targets[t + 1] - dofs
        actions[t] = np.clip(raw, -spec.a_max, spec.a_max)
        dofs = np.clip(dofs + actions[t], spec.limits_lo, spec.limits_hi)
    return actions


class DemoGenerationError(RuntimeError):
    pass


def scripted_demo(task_id, seed, jitter=True):
    """One scripted trajectory for (task, seed); replay-validated."""
    task_id = tasks.canonical_task_id(task_id)
    task = tasks.get_task(task_id)
    if task_id not in _SCHEDULES:
        raise tasks.UnknownTaskError(f"no scripted schedule for {task_id!r}")
    cfg = tasks.sim_config_from_task(task)
    state0 = tasks.build_scene(task, seed)
    frames = _SCHEDULES[task_id]
    if jitter:
        frames = _jitter_schedule(frames, np.random.default_rng(seed ^ 0x5EED))
    targets = schedule_targets(frames, task["horizon"])
    targets[0] = state0.hand.dofs  # schedules start at the task pose
    actions = track_targets(state0, targets, cfg)
    ro = rollout(state0, actions, cfg)
    traj = store.Trajectory(
        task_id=task_id,
        seed=int(seed),
        source="scripted",
        positions=ro.positions,
        hand_dofs=ro.hand_dofs,
        actions=actions,
        goal=ro.positions[-1].copy(),
    )
    store.check_replay(traj, cfg)
    return traj


def scripted_demos(task_id, count, seed, retry_cap=3):
    """A DemoSet of `count` validated demos; divergent seeds are retried."""
    out = store.DemoSet()
    s = int(seed)
    made = 0
    attempts = 0
    while made < count:
        if attempts >= count * retry_cap:
            raise DemoGenerationError(
                f"{task_id}: only {made}/{count} demos after {attempts} attempts"
            )
        attempts += 1
        try:
            traj = scripted_demo(task_id, s)
        except SimulationDiverged:
            s += 1
            continue
        out.add(traj, validate=False)  # scripted_demo already replay-checked
        made += 1
        s += 1
    return out
