import numpy as np
import pytest

from doughlab import autodiff as ad
from doughlab.mpm import kernels
from doughlab.mpm.hand import HandSpec, grid_boundary
from doughlab.mpm.sim import (
    FinalState,
    HandState,
    Material,
    ParticleState,
    Rollout,
    SimConfig,
    SimState,
    SimulationDiverged,
    rollout,
    rollout_grad,
    step,
)
from helpers import rel_err


def blob_positions(center, size, nx, ny):
    xs = np.linspace(center[0] - size[0] / 2, center[0] + size[0] / 2, nx)
    ys = np.linspace(center[1] - size[1] / 2, center[1] + size[1] / 2, ny)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def make_state(center=(0.5, 0.3), size=(0.12, 0.08), nx=4, ny=3,
               hand_dofs=None, jitter=0.0, seed=0):
    pos = blob_positions(center, size, nx, ny)
    if jitter:
        pos = pos + np.random.default_rng(seed).uniform(-jitter, jitter, pos.shape)
    particles = ParticleState.from_positions(pos, size[0] * size[1])
    spec = HandSpec()
    if hand_dofs is None:
        hand_dofs = np.array([0.5, 0.7, -np.pi / 2, 0.0, 0.0, 0.0])
    return SimState(particles, HandState(spec, np.asarray(hand_dofs, float)))


def quiet_cfg(**kw):
    base = dict(gravity_on=False, ground_on=False, border_on=False,
                contact_on=False)
    base.update(kw)
    return SimConfig(**base)


class TestWeightsAndConservation:
    def test_partition_of_unity_and_mass(self):
        rng = np.random.default_rng(3)
        state = make_state(jitter=0.01)
        p = state.particles
        p.v[:] = rng.normal(0, 0.5, p.v.shape)
        g = 64
        gm = np.zeros((g, g))
        gmom = np.zeros((g, g, 2))
        kernels.p2g_fwd(p.x, p.v, p.F, p.C, p.mass, p.vol0, p.mu, p.lam,
                        1e-4, float(g), gm, gmom)
        assert abs(gm.sum() - p.mass.sum()) <= 1e-12 * p.mass.sum()
        # 9 B-spline weights per particle sum to 1
        for i in range(p.n):
            xs = p.x[i] * g
            f = xs - np.floor(xs - 0.5)
            for fx in f:
                w = 0.5 * (1.5 - fx) ** 2 + (0.75 - (fx - 1) ** 2) + 0.5 * (fx - 0.5) ** 2
                assert abs(w - 1.0) <= 1e-12

    def test_momentum_conserved_without_gravity_or_boundaries(self):
        rng = np.random.default_rng(4)
        state = make_state(jitter=0.008, seed=5)
        state.particles.v[:] = rng.normal(0, 0.3, state.particles.v.shape)
        cfg = quiet_cfg(substeps=1)
        before = (state.particles.mass[:, None] * state.particles.v).sum(axis=0)
        out = step(state, np.zeros(6), cfg)
        after = (out.particles.mass[:, None] * out.particles.v).sum(axis=0)
        assert np.abs(after - before).max() <= 1e-9 * max(np.abs(before).max(), 1e-12)

    def test_randomized_conservation_suite(self):
        # 25 random substeps x the two conservation laws (fast smoke version
        # of the acceptance criterion, which runs 1000)
        rng = np.random.default_rng(6)
        for trial in range(25):
            state = make_state(
                center=(0.35 + 0.3 * rng.random(), 0.3 + 0.3 * rng.random()),
                jitter=0.01, seed=trial,
            )
            p = state.particles
            p.v[:] = rng.normal(0, 0.5, p.v.shape)
            p.F[:] = np.eye(2) + rng.normal(0, 0.02, p.F.shape)
            p.C[:] = rng.normal(0, 0.1, p.C.shape)
            g = 64
            gm = np.zeros((g, g))
            gmom = np.zeros((g, g, 2))
            kernels.p2g_fwd(p.x, p.v, p.F, p.C, p.mass, p.vol0, p.mu, p.lam,
                            1e-4, float(g), gm, gmom)
            assert abs(gm.sum() - p.mass.sum()) <= 1e-12 * p.mass.sum()
            cfg = quiet_cfg(substeps=1)
            before = (p.mass[:, None] * p.v).sum(axis=0)
            out = step(state, np.zeros(6), cfg)
            after = (out.particles.mass[:, None] * out.particles.v).sum(axis=0)
            scale = max(np.abs(before).max(), 1e-12)
            assert np.abs(after - before).max() <= 1e-9 * scale


class TestStep:
    def test_zero_action_keeps_hand(self):
        state = make_state()
        out = step(state, np.zeros(6), SimConfig())
        np.testing.assert_array_equal(out.hand.dofs, state.hand.dofs)

    def test_free_fall_single_particle(self):
        particles = ParticleState.from_positions(np.array([[0.5, 0.6]]), 1e-4)
        state = SimState(particles, HandState(HandSpec(), [0.2, 0.9, 0.0, 0, 0, 0]))
        cfg = SimConfig(substeps=1, contact_on=False)
        out = step(state, np.zeros(6), cfg)
        dv = out.particles.v[0] - state.particles.v[0]
        assert dv[0] == pytest.approx(0.0, abs=1e-15)
        assert dv[1] == pytest.approx(-9.8 * cfg.dt_sub, rel=1e-10)
        dx = out.particles.x[0] - state.particles.x[0]
        np.testing.assert_allclose(dx, out.particles.v[0] * cfg.dt_sub, rtol=1e-10)

    def test_action_integration_exact(self):
        state = make_state()
        spec = state.hand.spec
        a = np.array([0.004, -0.02, 0.01, 0.2, -0.01, 0.03])
        out = step(state, a, SimConfig())
        clamped = np.clip(
            state.hand.dofs + spec.clamp_action(a), spec.limits_lo, spec.limits_hi
        )
        np.testing.assert_array_equal(out.hand.dofs, clamped)
        # the applied delta equals the clamped action when limits inactive
        np.testing.assert_allclose(
            out.hand.dofs - state.hand.dofs, spec.clamp_action(a), atol=1e-15
        )

    def test_nonfinite_action_rejected(self):
        state = make_state()
        with pytest.raises(ValueError):
            step(state, np.array([np.nan, 0, 0, 0, 0, 0]), SimConfig())

    def test_divergence_detected(self):
        state = make_state()
        state.particles.v[0, 0] = np.nan
        with pytest.raises(SimulationDiverged) as e:
            step(state, np.zeros(6), SimConfig())
        assert e.value.substep == 0


class TestRollout:
    def test_empty_actions(self):
        state = make_state()
        ro = rollout(state, np.zeros((0, 6)), SimConfig())
        assert ro.positions.shape[0] == 1
        assert ro.horizon == 0

    def test_determinism_bitwise(self):
        state = make_state(jitter=0.005)
        actions = np.random.default_rng(7).uniform(-0.004, 0.004, (5, 6))
        cfg = SimConfig()
        r1 = rollout(state.copy(), actions, cfg)
        r2 = rollout(state.copy(), actions, cfg)
        np.testing.assert_array_equal(r1.positions, r2.positions)
        np.testing.assert_array_equal(r1.hand_dofs, r2.hand_dofs)

    def test_press_lowers_dough(self):
        # flat bar pressing down on a dough box
        state = make_state(center=(0.5, 0.155), size=(0.2, 0.09), nx=14, ny=7,
                           hand_dofs=[0.38, 0.28, 0.0, 0.0, 0.0, 0.0])
        cfg = SimConfig()
        top0 = state.particles.x[:, 1].max()
        actions = np.zeros((60, 6))
        actions[:30, 1] = -0.003  # descend onto the dough, then hold
        ro = rollout(state, actions, cfg)
        top1 = ro.positions[-1][:, 1].max()
        assert top1 < top0 - 0.01
        assert np.abs(ro.final_state.particles.v).max() < 1.0  # settled


class TestHandSdf:
    def test_axis_endpoint_inside(self):
        spec = HandSpec()
        dofs = np.array([0.4, 0.5, 0.3, 0.2, -0.1, 0.4])
        origins, angles = spec.frames(dofs)
        d, n, v = spec.hand_sdf(dofs, origins[1])
        assert d == pytest.approx(-spec.link_radii[1], abs=1e-12)
        np.testing.assert_array_equal(v, 0.0)

    def test_far_field_distance(self):
        spec = HandSpec()
        dofs = np.array([0.3, 0.3, 0.0, 0.0, 0.0, 0.0])
        p = np.array([0.3, 0.8])
        d, n, _ = spec.hand_sdf(dofs, p)
        # segment start is nearest point of link 0
        expect = 0.5 - spec.link_radii[0]
        assert d == pytest.approx(expect, abs=1e-12)
        np.testing.assert_allclose(n, [0.0, 1.0], atol=1e-12)

    def test_static_hand_zero_surface_velocity(self):
        spec = HandSpec()
        dofs = np.array([0.4, 0.5, 1.0, 0.3, 0.3, 0.3])
        for p in np.random.default_rng(0).random((10, 2)):
            _, _, v = spec.hand_sdf(dofs, p, dofs_next=dofs.copy(), dt=1e-4)
            np.testing.assert_allclose(v, 0.0, atol=1e-9)


class TestGridBoundary:
    def test_outside_band_unchanged(self):
        v = np.array([0.3, -0.2])
        out = grid_boundary(v, dist=0.5, normal=[0, 1], surf_vel=[0, 0],
                            mu=0.9, band=0.015)
        np.testing.assert_array_equal(out, v)

    def test_sticky_static_hand_zeroes(self):
        out = grid_boundary([0.5, -1.0], dist=-0.01, normal=[0, 1],
                            surf_vel=[0, 0], mu=np.inf, band=0.015)
        np.testing.assert_array_equal(out, 0.0)

    def test_frictionless_keeps_tangent_exactly(self):
        n = np.array([0.0, 1.0])
        v = np.array([0.37, -0.55])
        out = grid_boundary(v, dist=0.0, normal=n, surf_vel=[0, 0],
                            mu=0.0, band=0.015)
        assert out[0] == v[0]  # exact
        assert out[1] == 0.0

    def test_separating_velocity_untouched(self):
        v = np.array([0.1, 0.8])
        out = grid_boundary(v, dist=0.0, normal=[0, 1], surf_vel=[0, 0],
                            mu=0.9, band=0.015)
        np.testing.assert_array_equal(out, v)


def substep_forward(x, v, F, C, aux, pose_cur, pose_next, cfg, spec):
    """One full substep as a plain function of (x, v, F, C) and hand poses."""
    g = cfg.grid_res
    n = x.shape[0]
    gm = np.zeros((g, g))
    gmom = np.zeros((g, g, 2))
    gv = np.zeros((g, g, 2))
    x2 = np.zeros((n, 2))
    v2 = np.zeros((n, 2))
    F2 = np.zeros((n, 2, 2))
    C2 = np.zeros((n, 2, 2))
    mass, vol0, mu, lam, ys = aux
    kernels.p2g_fwd(x, v, F, C, mass, vol0, mu, lam, cfg.dt_sub, float(g), gm, gmom)
    o_c, a_c = spec.frames(pose_cur)
    o_n, a_n = spec.frames(pose_next)
    kernels.grid_fwd(gm, gmom, gv, cfg.dx, cfg.dt_sub, cfg.gravity[0],
                     cfg.gravity[1], cfg.vmax, cfg.gravity_on, cfg.ground_on,
                     cfg.ground_height, cfg.mu_ground, cfg.border_on,
                     cfg.contact_on, cfg.band_cells * cfg.dx, spec.friction,
                     np.ascontiguousarray(o_c[:, 0]), np.ascontiguousarray(o_c[:, 1]),
                     a_c.copy(), np.ascontiguousarray(o_n[:, 0]),
                     np.ascontiguousarray(o_n[:, 1]), a_n.copy(),
                     spec.link_lengths, spec.link_radii)
    kernels.g2p_fwd(x, F, gv, cfg.dt_sub, float(g), mu, ys, cfg.pos_lo,
                    cfg.pos_hi, x2, v2, F2, C2)
    return x2, v2, F2, C2, gm, gmom, gv


class TestKernelAdjoints:
    """Each backward kernel against central differences through its forward,
    using a random linear functional of the outputs."""

    def setup_method(self):
        rng = np.random.default_rng(11)
        state = make_state(center=(0.5, 0.2), size=(0.1, 0.06), nx=4, ny=3,
                           jitter=0.004, seed=2)
        p = state.particles
        p.v[:] = rng.normal(0, 0.4, p.v.shape)
        p.F[:] = np.eye(2) + rng.normal(0, 0.06, p.F.shape)
        p.C[:] = rng.normal(0, 2.0, p.C.shape)
        self.state = state
        self.spec = state.hand.spec
        # hand touching the dough so the contact path is exercised
        self.pose_cur = np.array([0.43, 0.33, -np.pi / 2, 0.25, 0.2, 0.1])
        self.pose_next = self.pose_cur + np.array(
            [0.0008, -0.001, 0.004, 0.006, 0.004, 0.002]
        ) / 20.0
        self.cfg = SimConfig()
        self.W = [rng.normal(size=(p.n, 2)), rng.normal(size=(p.n, 2)),
                  rng.normal(size=(p.n, 2, 2)), rng.normal(size=(p.n, 2, 2))]
        self.aux = (p.mass, p.vol0, p.mu, p.lam, p.yield_stress)

    def loss(self, x, v, F, C, pose_cur=None, pose_next=None):
        pc = self.pose_cur if pose_cur is None else pose_cur
        pn = self.pose_next if pose_next is None else pose_next
        x2, v2, F2, C2, _, _, _ = substep_forward(
            x, v, F, C, self.aux, pc, pn, self.cfg, self.spec
        )
        return (self.W[0] * x2).sum() + (self.W[1] * v2).sum() + \
               (self.W[2] * F2).sum() + (self.W[3] * C2).sum()

    def analytic_grads(self):
        p = self.state.particles
        n = p.n
        g = self.cfg.grid_res
        x2, v2, F2, C2, gm, gmom, gv = substep_forward(
            p.x, p.v, p.F, p.C, self.aux, self.pose_cur, self.pose_next,
            self.cfg, self.spec
        )
        xb = np.zeros((n, 2))
        vb = np.zeros((n, 2))
        Fb = np.zeros((n, 2, 2))
        Cb = np.zeros((n, 2, 2))
        gvb = np.zeros((g, g, 2))
        kernels.g2p_bwd(p.x, p.F, gv, self.cfg.dt_sub, float(g), p.mu,
                        p.yield_stress, self.cfg.pos_lo, self.cfg.pos_hi,
                        self.W[0].copy(), self.W[1].copy(), self.W[2].copy(),
                        self.W[3].copy(), xb, Fb, gvb)
        o_c, a_c = self.spec.frames(self.pose_cur)
        o_n, a_n = self.spec.frames(self.pose_next)
        L = self.spec.n_joints
        gmb = np.zeros((g, g))
        gmomb = np.zeros((g, g, 2))
        lbc = [np.zeros(L) for _ in range(3)]
        lbn = [np.zeros(L) for _ in range(3)]
        kernels.grid_bwd(gm, gmom, gvb, self.cfg.dx, self.cfg.dt_sub,
                         self.cfg.gravity[0], self.cfg.gravity[1],
                         self.cfg.vmax, self.cfg.gravity_on, self.cfg.ground_on,
                         self.cfg.ground_height, self.cfg.mu_ground,
                         self.cfg.border_on, self.cfg.contact_on,
                         self.cfg.band_cells * self.cfg.dx, self.spec.friction,
                         np.ascontiguousarray(o_c[:, 0]),
                         np.ascontiguousarray(o_c[:, 1]), a_c.copy(),
                         np.ascontiguousarray(o_n[:, 0]),
                         np.ascontiguousarray(o_n[:, 1]), a_n.copy(),
                         self.spec.link_lengths, self.spec.link_radii,
                         gmb, gmomb, lbc[0], lbc[1], lbc[2],
                         lbn[0], lbn[1], lbn[2])
        kernels.p2g_bwd(p.x, p.v, p.F, p.C, p.mass, p.vol0, p.mu, p.lam,
                        self.cfg.dt_sub, float(g), gmb, gmomb, xb, vb, Fb, Cb)
        from doughlab.mpm.sim import _pose_adjoint_to_dofs

        pose_c_bar = _pose_adjoint_to_dofs(self.spec, self.pose_cur, lbc)
        pose_n_bar = _pose_adjoint_to_dofs(self.spec, self.pose_next, lbn)
        return xb, vb, Fb, Cb, pose_c_bar, pose_n_bar

    def fd_grad(self, arr, f, h):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * h)
        return g

    def test_substep_adjoints_match_fd(self):
        p = self.state.particles
        xb, vb, Fb, Cb, pcb, pnb = self.analytic_grads()

        f = lambda: self.loss(p.x, p.v, p.F, p.C)
        assert rel_err(vb, self.fd_grad(p.v, f, 1e-6)) <= 2e-6
        assert rel_err(Cb, self.fd_grad(p.C, f, 1e-6)) <= 2e-6
        assert rel_err(Fb, self.fd_grad(p.F, f, 1e-7)) <= 1e-4
        assert rel_err(xb, self.fd_grad(p.x, f, 1e-8)) <= 1e-4

    def test_hand_pose_adjoints_match_fd(self):
        p = self.state.particles
        _, _, _, _, pcb, pnb = self.analytic_grads()
        fc = lambda: self.loss(p.x, p.v, p.F, p.C, pose_cur=self.pose_cur)
        gc = self.fd_grad(self.pose_cur, fc, 1e-8)
        assert rel_err(pcb, gc) <= 1e-4
        fn = lambda: self.loss(p.x, p.v, p.F, p.C, pose_next=self.pose_next)
        gn = self.fd_grad(self.pose_next, fn, 1e-8)
        assert rel_err(pnb, gn) <= 1e-4


class TestRolloutGrad:
    def make_loss(self, target):
        def loss_fn(view):
            diff = ad.sub(view.positions, ad.Tensor(target))
            return ad.tmean(ad.square(diff))

        return loss_fn

    def test_constant_loss_zero_grads(self):
        state = make_state()
        actions = np.random.default_rng(1).uniform(-0.003, 0.003, (3, 6))

        def const_loss(view):
            return ad.tsum(ad.mul(view.positions, 0.0))

        grads, loss, _ = rollout_grad(state, actions, const_loss, SimConfig())
        np.testing.assert_array_equal(grads, 0.0)
        assert loss == 0.0

    def test_no_contact_means_zero_joint_grads(self):
        # hand far away from dough; loss depends only on dough
        state = make_state(hand_dofs=[0.85, 0.85, 0.0, 0, 0, 0])
        actions = np.zeros((4, 6))
        actions[:, 3:] = 0.01
        target = state.particles.x + 0.01
        grads, _, _ = rollout_grad(state, actions, self.make_loss(target),
                                   SimConfig())
        np.testing.assert_array_equal(grads, 0.0)

    def test_gradient_matches_fd_with_contact(self):
        # hand pressing into the dough over 3 control steps
        state = make_state(center=(0.5, 0.16), size=(0.10, 0.07), nx=4, ny=3,
                           jitter=0.003, seed=9,
                           hand_dofs=[0.44, 0.28, -np.pi / 2, 0.15, 0.1, 0.05])
        cfg = SimConfig()
        rng = np.random.default_rng(12)
        actions = rng.uniform(-0.5, 0.5, (3, 6)) * state.hand.spec.a_max * 0.8
        actions[:, 1] -= 0.004  # descend into contact
        target = state.particles.x * 0.98 + 0.01
        loss_fn = self.make_loss(target)
        grads, loss0, _ = rollout_grad(state, actions, loss_fn, cfg)

        from doughlab.mpm.sim import rollout_loss

        # contact dynamics are piecewise smooth; h must be small enough that
        # the central-difference window stays inside one smooth piece
        h = 1e-6
        checked = 0
        for t in range(3):
            for d in range(6):
                a = actions.copy()
                a[t, d] += h
                lp, _ = rollout_loss(state, a, loss_fn, cfg)
                a[t, d] -= 2 * h
                lm, _ = rollout_loss(state, a, loss_fn, cfg)
                fd = (lp - lm) / (2 * h)
                if abs(grads[t, d]) > 1e-8 or abs(fd) > 1e-8:
                    err = abs(grads[t, d] - fd) / max(abs(fd), abs(grads[t, d]))
                    assert err <= 1e-3, (t, d, grads[t, d], fd)
                    checked += 1
        assert checked >= 6

    def test_hand_state_loss_grad(self):
        state = make_state()
        actions = np.zeros((2, 6))

        def loss_fn(view):
            return ad.tsum(ad.square(view.hand_dofs))

        grads, _, _ = rollout_grad(state, actions, loss_fn, SimConfig())
        # q_T = q_0 + a_0 + a_1 (limits inactive), so dL/da = 2 q_T
        expect = 2.0 * state.hand.dofs
        np.testing.assert_allclose(grads[0], expect, rtol=1e-12)
        np.testing.assert_allclose(grads[1], expect, rtol=1e-12)
