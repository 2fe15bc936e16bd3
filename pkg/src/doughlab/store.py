"""Demonstration persistence: the "DXD1" binary container and the DemoSet.

Container layout (single format for demos, params, and reports):

    magic "DXD1" (4 bytes)
    u32 little-endian manifest byte length
    UTF-8 JSON manifest {kind, version, meta, arrays:[{name,dtype,shape,offset}]}
    raw little-endian array bytes (offsets relative to this data section)

Round trips are bit-exact; dtypes are f32/f64 only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DXD1"
VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8"}
_DTYPE_NAMES = {np.dtype("<f4"): "f32", np.dtype("<f8"): "f64"}


class ContainerError(RuntimeError):
    pass


class MagicError(ContainerError):
    """File does not start with the DXD1 magic."""


class VersionError(ContainerError):
    """Manifest declares an unsupported format version."""


class TruncationError(ContainerError):
    """File ends before a declared array; names the missing descriptor."""


def save_container(path, kind, meta, arrays):
    """Write a container; `arrays` maps name -> float32/float64 ndarray."""
    descriptors = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_NAMES:
            raise ContainerError(
                f"array {name!r} has dtype {arr.dtype}; only f32/f64 supported"
            )
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        descriptors.append(
            {
                "name": name,
                "dtype": _DTYPE_NAMES[arr.dtype],
                "shape": list(arr.shape),
                "offset": offset,
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"kind": kind, "version": VERSION, "meta": meta, "arrays": descriptors}
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


@dataclass
class Container:
    kind: str
    meta: dict
    arrays: dict


def load_container(path, expect_kind=None):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise MagicError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise TruncationError(f"{path}: truncated before manifest length")
    (mlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + mlen:
        raise TruncationError(f"{path}: truncated inside manifest")
    try:
        manifest = json.loads(data[8 : 8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{path}: unreadable manifest: {e}") from e
    if manifest.get("version") != VERSION:
        raise VersionError(
            f"{path}: container version {manifest.get('version')!r}, "
            f"this build reads {VERSION}"
        )
    if expect_kind is not None and manifest.get("kind") != expect_kind:
        raise ContainerError(
            f"{path}: kind {manifest.get('kind')!r}, expected {expect_kind!r}"
        )
    payload = data[8 + mlen :]
    arrays = {}
    for desc in manifest["arrays"]:
        dt = np.dtype(_DTYPES[desc["dtype"]])
        count = int(np.prod(desc["shape"], dtype=np.int64)) if desc["shape"] else 1
        start = desc["offset"]
        end = start + count * dt.itemsize
        if end > len(payload):
            raise TruncationError(
                f"{path}: array {desc['name']!r} extends past end of file"
            )
        arrays[desc["name"]] = (
            np.frombuffer(payload[start:end], dtype=dt).reshape(desc["shape"]).copy()
        )
    return Container(kind=manifest["kind"], meta=manifest.get("meta", {}),
                     arrays=arrays)


# ---------------------------------------------------------------------------
# trajectories and demo sets


@dataclass
class Trajectory:
    task_id: str
    seed: int
    source: str  # scripted | teleop | explored
    positions: np.ndarray  # (T+1, n, 2)
    hand_dofs: np.ndarray  # (T+1, D)
    actions: np.ndarray  # (T, D)
    goal: np.ndarray  # (m, 2) final-shape point cloud

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.hand_dofs = np.asarray(self.hand_dofs, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.goal = np.asarray(self.goal, dtype=np.float64)
        if self.positions.shape[0] != self.actions.shape[0] + 1:
            raise ValueError(
                f"need |observations| = |actions|+1, got "
                f"{self.positions.shape[0]} vs {self.actions.shape[0]}"
            )
        if self.hand_dofs.shape[0] != self.positions.shape[0]:
            raise ValueError("hand_dofs length must match positions")

    @property
    def length(self):
        return self.actions.shape[0]


class ReplayMismatch(RuntimeError):
    pass


def replay(traj, cfg=None):
    """Re-simulate (task, seed, actions); returns the replayed Rollout."""
    from . import tasks as tasks_mod
    from .mpm.sim import rollout

    task = tasks_mod.get_task(traj.task_id)
    state0 = tasks_mod.build_scene(task, traj.seed)
    cfg = cfg or tasks_mod.sim_config_from_task(task)
    return rollout(state0, traj.actions, cfg)


def check_replay(traj, cfg=None):
    """Replay determinism: stored observations must reproduce bit-exactly."""
    ro = replay(traj, cfg)
    if not (
        np.array_equal(ro.positions, traj.positions)
        and np.array_equal(ro.hand_dofs, traj.hand_dofs)
    ):
        raise ReplayMismatch(
            f"trajectory (task={traj.task_id}, seed={traj.seed}) does not "
            f"replay bit-exactly"
        )


@dataclass
class DemoSet:
    tasks: dict = field(default_factory=dict)
    trajectories: list = field(default_factory=list)

    def add(self, traj, validate=True):
        from . import tasks as tasks_mod

        if traj.task_id not in self.tasks:
            self.tasks[traj.task_id] = tasks_mod.get_task(traj.task_id)
        if validate:
            check_replay(traj)
        self.trajectories.append(traj)

    def __len__(self):
        return len(self.trajectories)


def save(demo_set, path):
    meta = {
        "tasks": demo_set.tasks,
        "trajectories": [
            {
                "task": t.task_id,
                "seed": int(t.seed),
                "source": t.source,
                "length": int(t.length),
            }
            for t in demo_set.trajectories
        ],
    }
    arrays = {}
    for i, t in enumerate(demo_set.trajectories):
        arrays[f"traj/{i}/positions"] = t.positions
        arrays[f"traj/{i}/hand_dofs"] = t.hand_dofs
        arrays[f"traj/{i}/actions"] = t.actions
        arrays[f"traj/{i}/goal"] = t.goal
    save_container(path, "demos", meta, arrays)


def load(path):
    box = load_container(path, expect_kind="demos")
    out = DemoSet(tasks=box.meta.get("tasks", {}))
    for i, rec in enumerate(box.meta["trajectories"]):
        out.trajectories.append(
            Trajectory(
                task_id=rec["task"],
                seed=rec["seed"],
                source=rec["source"],
                positions=box.arrays[f"traj/{i}/positions"],
                hand_dofs=box.arrays[f"traj/{i}/hand_dofs"],
                actions=box.arrays[f"traj/{i}/actions"],
                goal=box.arrays[f"traj/{i}/goal"],
            )
        )
    return out


# ---------------------------------------------------------------------------
# parameter checkpoints (shared by all models)


def save_params(path, model_kind, config_meta, params):
    """Persist named parameter tensors through the container."""
    arrays = {name: p.data for name, p in params.items()}
    save_container(path, "params", {"model": model_kind, "config": config_meta},
                   arrays)


def load_params(path, expect_model=None):
    box = load_container(path, expect_kind="params")
    if expect_model is not None and box.meta.get("model") != expect_model:
        raise ContainerError(
            f"{path}: params for {box.meta.get('model')!r}, "
            f"expected {expect_model!r}"
        )
    return box.meta.get("config", {}), box.arrays


# ---------------------------------------------------------------------------
# window sampling for skill training


def window_samples(demo_set, sample_len=50, batch=8, seed=0, n_batches=None):
    """Seeded uniform contiguous windows, never crossing trajectories.

    Yields lists of (traj_index, start) pairs; each window spans
    `sample_len` actions (and sample_len+1 observations).
    """
    eligible = [
        (i, t.length - sample_len)
        for i, t in enumerate(demo_set.trajectories)
        if t.length >= sample_len
    ]
    if not eligible:
        raise ValueError(
            f"no trajectory is at least {sample_len} steps long"
        )
    rng = np.random.default_rng(seed)
    produced = 0
    while n_batches is None or produced < n_batches:
        out = []
        for _ in range(batch):
            ti, room = eligible[rng.integers(0, len(eligible))]
            out.append((ti, int(rng.integers(0, room + 1))))
        produced += 1
        yield out
