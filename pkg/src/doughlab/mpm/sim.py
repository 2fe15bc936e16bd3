"""Differentiable 2D elastoplastic simulation on the unit square.

`step` advances one control step (hand pose integrated kinematically, dough
by `substeps` MLS-MPM substeps). `rollout` records states at control-step
boundaries. `rollout_grad` returns d(loss)/d(actions) by a reverse sweep
that checkpoints at control steps and recomputes substeps, so memory is
O(horizon), not O(horizon x substeps).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .. import autodiff as ad
from . import kernels
from .hand import HandSpec


class SimulationDiverged(RuntimeError):
    def __init__(self, control_step, substep, particle):
        self.control_step = control_step
        self.substep = substep
        self.particle = particle
        super().__init__(
            f"simulation diverged at control step {control_step}, "
            f"substep {substep} (particle {particle})"
        )


@dataclass
class SimConfig:
    grid_res: int = 64
    dt_sub: float = 1e-4
    substeps: int = 20
    gravity: tuple = (0.0, -9.8)
    ground_height: float = 0.1
    mu_ground: float = -1.0  # negative = sticky ground (the default)
    band_cells: float = 1.0  # hand influence band, in cells
    gravity_on: bool = True
    ground_on: bool = True
    border_on: bool = True
    contact_on: bool = True

    @property
    def dx(self):
        return 1.0 / self.grid_res

    @property
    def vmax(self):
        return kernels.VMAX_FACTOR * self.dx / self.dt_sub

    @property
    def pos_lo(self):
        return 2.0 * self.dx

    @property
    def pos_hi(self):
        return 1.0 - 2.0 * self.dx


@dataclass
class Material:
    youngs: float = 5e3
    poisson: float = 0.2
    yield_stress: float = 50.0
    density: float = 1.0

    @property
    def mu(self):
        return self.youngs / (2.0 * (1.0 + self.poisson))

    @property
    def lam(self):
        return (
            self.youngs
            * self.poisson
            / ((1.0 + self.poisson) * (1.0 - 2.0 * self.poisson))
        )


@dataclass
class ParticleState:
    x: np.ndarray
    v: np.ndarray
    F: np.ndarray
    C: np.ndarray
    mass: np.ndarray
    vol0: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    yield_stress: np.ndarray

    @classmethod
    def from_positions(cls, positions, total_area, material=None):
        """Rest particles tiling `total_area` of material, identity F."""
        mat = material or Material()
        pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        n = pos.shape[0]
        vol = np.full(n, total_area / n)
        eye = np.tile(np.eye(2), (n, 1, 1))
        return cls(
            x=pos.copy(),
            v=np.zeros((n, 2)),
            F=eye.copy(),
            C=np.zeros((n, 2, 2)),
            mass=vol * mat.density,
            vol0=vol,
            mu=np.full(n, mat.mu),
            lam=np.full(n, mat.lam),
            yield_stress=np.full(n, mat.yield_stress),
        )

    @property
    def n(self):
        return self.x.shape[0]

    def copy(self):
        return ParticleState(
            self.x.copy(), self.v.copy(), self.F.copy(), self.C.copy(),
            self.mass, self.vol0, self.mu, self.lam, self.yield_stress,
        )


@dataclass
class HandState:
    spec: HandSpec
    dofs: np.ndarray

    def __post_init__(self):
        self.dofs = np.asarray(self.dofs, dtype=np.float64)
        if self.dofs.shape != (self.spec.n_dofs,):
            raise ValueError("hand dof vector has wrong length")

    def copy(self):
        return HandState(self.spec, self.dofs.copy())


@dataclass
class SimState:
    particles: ParticleState
    hand: HandState

    def copy(self):
        return SimState(self.particles.copy(), self.hand.copy())


def _interp_poses(spec, dofs, action):
    """Per-substep hand poses for one control step (S+1 rows)."""
    dq = spec.clamp_action(action)
    q_next = np.clip(dofs + dq, spec.limits_lo, spec.limits_hi)
    return dofs, q_next


def _link_arrays(spec, origins, angles):
    return (
        np.ascontiguousarray(origins[:, 0]),
        np.ascontiguousarray(origins[:, 1]),
        np.ascontiguousarray(angles),
        spec.link_lengths,
        spec.link_radii,
    )


class _StepBuffers:
    """Scratch arrays reused across substeps of one control step."""

    def __init__(self, n, g):
        self.gm = np.zeros((g, g))
        self.gmom = np.zeros((g, g, 2))
        self.gv = np.zeros((g, g, 2))
        self.x2 = np.zeros((n, 2))
        self.v2 = np.zeros((n, 2))
        self.F2 = np.zeros((n, 2, 2))
        self.C2 = np.zeros((n, 2, 2))


def _run_substeps(state, poses, cfg, control_step, record=None):
    """Advance particles through cfg.substeps; optionally record per-substep
    inputs and grid arrays for the adjoint sweep."""
    spec = state.hand.spec
    p = state.particles
    x, v, F, C = p.x.copy(), p.v.copy(), p.F.copy(), p.C.copy()
    g = cfg.grid_res
    buf = _StepBuffers(p.n, g)
    origins, angles = spec.frames_batch(poses)
    for s in range(cfg.substeps):
        if record is not None:
            rec = {
                "x": x.copy(), "v": v.copy(), "F": F.copy(), "C": C.copy(),
            }
        kernels.p2g_fwd(x, v, F, C, p.mass, p.vol0, p.mu, p.lam,
                        cfg.dt_sub, float(g), buf.gm, buf.gmom)
        lox, loy, lal, llen, lrad = _link_arrays(spec, origins[s], angles[s])
        lox2, loy2, lal2, _, _ = _link_arrays(spec, origins[s + 1], angles[s + 1])
        kernels.grid_fwd(
            buf.gm, buf.gmom, buf.gv, cfg.dx, cfg.dt_sub,
            cfg.gravity[0], cfg.gravity[1], cfg.vmax, cfg.gravity_on,
            cfg.ground_on, cfg.ground_height, cfg.mu_ground, cfg.border_on,
            cfg.contact_on, cfg.band_cells * cfg.dx, spec.friction,
            lox, loy, lal, lox2, loy2, lal2, llen, lrad,
        )
        status = kernels.g2p_fwd(
            x, F, buf.gv, cfg.dt_sub, float(g), p.mu, p.yield_stress,
            cfg.pos_lo, cfg.pos_hi, buf.x2, buf.v2, buf.F2, buf.C2,
        )
        if status >= 0:
            raise SimulationDiverged(control_step, s, status)
        if record is not None:
            rec["gm"] = buf.gm.copy()
            rec["gmom"] = buf.gmom.copy()
            rec["gv"] = buf.gv.copy()
            record.append(rec)
        x, buf.x2 = buf.x2, x
        v, buf.v2 = buf.v2, v
        F, buf.F2 = buf.F2, F
        C, buf.C2 = buf.C2, C
    out = state.copy()
    out.particles.x, out.particles.v = x, v
    out.particles.F, out.particles.C = F, C
    return out


def step(state, action, cfg, control_step=0):
    """One control step: integrate hand dofs, run MLS-MPM substeps."""
    spec = state.hand.spec
    q, q_next = _interp_poses(spec, state.hand.dofs, action)
    fr = np.linspace(0.0, 1.0, cfg.substeps + 1)[:, None]
    poses = q[None, :] * (1.0 - fr) + q_next[None, :] * fr
    out = _run_substeps(state, poses, cfg, control_step)
    out.hand.dofs = q_next
    return out


@dataclass
class Rollout:
    positions: np.ndarray  # (T+1, n, 2)
    hand_dofs: np.ndarray  # (T+1, D)
    actions: np.ndarray  # (T, D)
    final_state: SimState = None
    states: list = None  # populated when keep_states

    @property
    def horizon(self):
        return self.actions.shape[0]


def rollout(state0, actions, cfg, keep_states=False):
    """Run the action sequence; deterministic given (state0, actions)."""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim == 1:
        actions = actions.reshape(0, state0.hand.spec.n_dofs)
    if not np.all(np.isfinite(actions)):
        raise ValueError("actions must be finite")
    t_len = actions.shape[0]
    n = state0.particles.n
    positions = np.zeros((t_len + 1, n, 2))
    dofs = np.zeros((t_len + 1, state0.hand.spec.n_dofs))
    state = state0.copy()
    states = [state.copy()] if keep_states else None
    positions[0] = state.particles.x
    dofs[0] = state.hand.dofs
    for t in range(t_len):
        state = step(state, actions[t], cfg, control_step=t)
        positions[t + 1] = state.particles.x
        dofs[t + 1] = state.hand.dofs
        if keep_states:
            states.append(state.copy())
    return Rollout(positions, dofs, actions.copy(), final_state=state,
                   states=states)


class FinalState:
    """Differentiable view of the final state handed to loss builders."""

    def __init__(self, state):
        self.positions = ad.Tensor(state.particles.x.copy(), requires_grad=True)
        self.hand_dofs = ad.Tensor(state.hand.dofs.copy(), requires_grad=True)
        self.velocities = state.particles.v.copy()


def _pose_adjoint_to_dofs(spec, pose, lb):
    """Map link-frame adjoints (lox,loy,lal bars) to dof space."""
    jo, ja = spec.frame_jacobians(pose)
    loxb, loyb, lalb = lb
    out = np.zeros(spec.n_dofs)
    for l in range(spec.n_joints):
        out += jo[l, 0] * loxb[l] + jo[l, 1] * loyb[l] + ja[l] * lalb[l]
    return out


def rollout_grad(state0, actions, loss_fn, cfg):
    """d(loss)/d(actions) for a scalar loss of the final state.

    loss_fn receives a FinalState (positions and hand dofs as traced
    tensors) and must return a scalar tape tensor. Returns
    (grads (T, D), loss value, Rollout).
    """
    actions = np.asarray(actions, dtype=np.float64)
    ro = rollout(state0, actions, cfg, keep_states=True)
    spec = state0.hand.spec
    t_len = actions.shape[0]
    n = state0.particles.n
    g = cfg.grid_res
    substeps = cfg.substeps

    view = FinalState(ro.final_state)
    with ad.Tape() as tape:
        loss = loss_fn(view)
    tape.backward(loss)
    xb = view.positions.grad
    xb = np.zeros((n, 2)) if xb is None else xb.copy()
    qb_next = view.hand_dofs.grad
    qb_next = np.zeros(spec.n_dofs) if qb_next is None else qb_next.copy()
    vb = np.zeros((n, 2))
    Fb = np.zeros((n, 2, 2))
    Cb = np.zeros((n, 2, 2))

    grads = np.zeros_like(actions)
    L = spec.n_joints
    frac = np.linspace(0.0, 1.0, substeps + 1)

    for t in range(t_len - 1, -1, -1):
        state_t = ro.states[t]
        q = state_t.hand.dofs
        dq_raw = np.asarray(actions[t], dtype=np.float64)
        dq = spec.clamp_action(dq_raw)
        q_next = np.clip(q + dq, spec.limits_lo, spec.limits_hi)
        mask_a = (np.abs(dq_raw) < spec.a_max).astype(np.float64)
        mask_l = ((q + dq > spec.limits_lo) & (q + dq < spec.limits_hi)).astype(
            np.float64
        )
        poses = q[None, :] * (1.0 - frac[:, None]) + q_next[None, :] * frac[:, None]
        record = []
        _run_substeps(state_t, poses, cfg, t, record=record)

        origins, angles = spec.frames_batch(poses)
        pose_bar = np.zeros((substeps + 1, spec.n_dofs))
        gvb = np.zeros((g, g, 2))
        gmb = np.zeros((g, g))
        gmomb = np.zeros((g, g, 2))
        for s in range(substeps - 1, -1, -1):
            rec = record[s]
            xb_in = np.zeros((n, 2))
            vb_in = np.zeros((n, 2))
            Fb_in = np.zeros((n, 2, 2))
            Cb_in = np.zeros((n, 2, 2))
            kernels.g2p_bwd(
                rec["x"], rec["F"], rec["gv"], cfg.dt_sub, float(g),
                state_t.particles.mu, state_t.particles.yield_stress,
                cfg.pos_lo, cfg.pos_hi, xb, vb, Fb, Cb, xb_in, Fb_in, gvb,
            )
            lox, loy, lal, llen, lrad = _link_arrays(spec, origins[s], angles[s])
            lox2, loy2, lal2, _, _ = _link_arrays(
                spec, origins[s + 1], angles[s + 1]
            )
            lb_c = (np.zeros(L), np.zeros(L), np.zeros(L))
            lb_n = (np.zeros(L), np.zeros(L), np.zeros(L))
            kernels.grid_bwd(
                rec["gm"], rec["gmom"], gvb, cfg.dx, cfg.dt_sub,
                cfg.gravity[0], cfg.gravity[1], cfg.vmax, cfg.gravity_on,
                cfg.ground_on, cfg.ground_height, cfg.mu_ground, cfg.border_on,
                cfg.contact_on, cfg.band_cells * cfg.dx, spec.friction,
                lox, loy, lal, lox2, loy2, lal2, llen, lrad,
                gmb, gmomb,
                lb_c[0], lb_c[1], lb_c[2], lb_n[0], lb_n[1], lb_n[2],
            )
            pose_bar[s] += _pose_adjoint_to_dofs(spec, poses[s], lb_c)
            pose_bar[s + 1] += _pose_adjoint_to_dofs(spec, poses[s + 1], lb_n)
            kernels.p2g_bwd(
                rec["x"], rec["v"], rec["F"], rec["C"],
                state_t.particles.mass, state_t.particles.vol0,
                state_t.particles.mu, state_t.particles.lam,
                cfg.dt_sub, float(g), gmb, gmomb, xb_in, vb_in, Fb_in, Cb_in,
            )
            xb, vb, Fb, Cb = xb_in, vb_in, Fb_in, Cb_in

        # poses[s] = (1-frac) q + frac q_next
        q_direct = ((1.0 - frac)[:, None] * pose_bar).sum(axis=0)
        qn_bar = (frac[:, None] * pose_bar).sum(axis=0) + qb_next
        grads[t] = mask_a * mask_l * qn_bar
        qb_next = q_direct + mask_l * qn_bar

    return grads, float(loss.data), ro


def rollout_loss(state0, actions, loss_fn, cfg):
    """Forward-only loss of the final state (no tape, no gradients)."""
    ro = rollout(state0, actions, cfg)
    view = FinalState(ro.final_state)
    return float(loss_fn(view).data), ro
