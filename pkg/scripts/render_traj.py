"""Render trajectory frames to a PNG strip for quick visual checks.

Usage: python3 scripts/render_traj.py <task_id> [seed] [out.png]
"""

import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

sys.path.insert(0, "src")

from doughlab import demos, tasks


def draw(ax, positions, dofs, spec, ground=0.1, goal=None):
    ax.add_patch(plt.Rectangle((0, 0), 1, ground, color="#d8c9a3"))
    if goal is not None:
        ax.scatter(goal[:, 0], goal[:, 1], s=2, c="#90ee90", alpha=0.6)
    ax.scatter(positions[:, 0], positions[:, 1], s=2, c="#8a5a2b")
    origins, angles = spec.frames(dofs)
    for l in range(spec.n_joints):
        a = origins[l]
        b = a + spec.link_lengths[l] * np.array(
            [np.cos(angles[l]), np.sin(angles[l])]
        )
        ax.plot([a[0], b[0]], [a[1], b[1]], lw=spec.link_radii[l] * 400,
                solid_capstyle="round", c="#4060c0", alpha=0.8)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 0.7)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])


def main():
    task_id = sys.argv[1] if len(sys.argv) > 1 else "fold2d_left"
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
    out = sys.argv[3] if len(sys.argv) > 3 else f"/tmp/{task_id}_{seed}.png"
    traj = demos.scripted_demo(task_id, seed)
    spec = tasks.hand_spec_from_task(tasks.get_task(task_id))
    idx = np.linspace(0, traj.length, 8).astype(int)
    fig, axes = plt.subplots(1, len(idx), figsize=(3 * len(idx), 3))
    for ax, t in zip(axes, idx):
        draw(ax, traj.positions[t], traj.hand_dofs[t], spec)
        ax.set_title(f"t={t}")
    fig.tight_layout()
    fig.savefig(out, dpi=70)
    c0 = traj.positions[0][:, 0].mean()
    c1 = traj.positions[-1][:, 0].mean()
    print(f"{task_id} seed={seed}: centroid x {c0:.3f} -> {c1:.3f} "
          f"(shift {c1 - c0:+.3f}); wrote {out}")


if __name__ == "__main__":
    main()
