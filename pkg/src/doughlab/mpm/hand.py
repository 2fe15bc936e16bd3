"""Jointed planar hand: a chain of capsule links on a movable, rotatable base.

Degrees of freedom are [base_x, base_y, base_angle, q_1..q_F]; each joint
rotates the remainder of the chain about the end of the previous link.
Positions are kinematic (the hand is infinitely stiff): actions are clamped
deltas integrated as q_{t+1} = clamp(q_t + clamp(a, a_max), limits).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class HandSpec:
    link_lengths: np.ndarray = field(
        default_factory=lambda: np.array([0.08, 0.08, 0.08])
    )
    link_radii: np.ndarray = field(
        default_factory=lambda: np.array([0.018, 0.018, 0.018])
    )
    friction: float = 0.9
    a_max: np.ndarray = None  # per-dof action bound
    limits_lo: np.ndarray = None
    limits_hi: np.ndarray = None

    def __post_init__(self):
        self.link_lengths = np.asarray(self.link_lengths, dtype=np.float64)
        self.link_radii = np.asarray(self.link_radii, dtype=np.float64)
        if np.any(self.link_radii <= 0):
            raise ValueError("capsule radii must be positive")
        f = self.n_joints
        if self.a_max is None:
            self.a_max = np.array([0.008, 0.008, 0.03] + [0.05] * f)
        else:
            self.a_max = np.asarray(self.a_max, dtype=np.float64)
        if self.limits_lo is None:
            self.limits_lo = np.array([0.05, 0.05, -6.4] + [-2.2] * f)
        else:
            self.limits_lo = np.asarray(self.limits_lo, dtype=np.float64)
        if self.limits_hi is None:
            self.limits_hi = np.array([0.95, 0.95, 6.4] + [2.2] * f)
        else:
            self.limits_hi = np.asarray(self.limits_hi, dtype=np.float64)

    @property
    def n_joints(self):
        return len(self.link_lengths)

    @property
    def n_dofs(self):
        return 3 + self.n_joints

    def clamp_action(self, dq):
        dq = np.asarray(dq, dtype=np.float64)
        if dq.shape != (self.n_dofs,):
            raise ValueError(f"action must have {self.n_dofs} components")
        if not np.all(np.isfinite(dq)):
            raise ValueError("action must be finite")
        return np.clip(dq, -self.a_max, self.a_max)

    def integrate(self, dofs, dq):
        """q_{t+1} = clamp(q_t + clamp(dq, a_max), limits)."""
        return np.clip(dofs + self.clamp_action(dq), self.limits_lo, self.limits_hi)

    def frames(self, dofs):
        """World frame (origin, angle) per link for one dof vector.

        Returns (origins (L, 2), angles (L,)): link l is the capsule from
        origin_l to origin_l + len_l * dir(angle_l), radius radii_l.
        """
        dofs = np.asarray(dofs, dtype=np.float64)
        L = self.n_joints
        origins = np.empty((L, 2))
        angles = np.empty(L)
        o = dofs[:2].copy()
        a = dofs[2]
        for l in range(L):
            a = a + dofs[3 + l]
            origins[l] = o
            angles[l] = a
            o = o + self.link_lengths[l] * np.array([np.cos(a), np.sin(a)])
        return origins, angles

    def frames_batch(self, poses):
        """frames() for a (S, D) batch -> origins (S, L, 2), angles (S, L)."""
        poses = np.asarray(poses, dtype=np.float64)
        s, _ = poses.shape
        L = self.n_joints
        origins = np.empty((s, L, 2))
        angles = np.empty((s, L))
        o = poses[:, :2].copy()
        a = poses[:, 2].copy()
        for l in range(L):
            a = a + poses[:, 3 + l]
            origins[:, l] = o
            angles[:, l] = a
            o = o + self.link_lengths[l] * np.stack([np.cos(a), np.sin(a)], axis=1)
        return origins, angles

    def frame_jacobians(self, dofs):
        """d(origin_l)/d(dofs) (L, 2, D) and d(angle_l)/d(dofs) (L, D)."""
        L, D = self.n_joints, self.n_dofs
        origins, angles = self.frames(dofs)
        ends = origins + self.link_lengths[:, None] * np.stack(
            [np.cos(angles), np.sin(angles)], axis=1
        )
        jo = np.zeros((L, 2, D))
        ja = np.zeros((L, D))
        for l in range(L):
            jo[l, 0, 0] = 1.0
            jo[l, 1, 1] = 1.0
            ja[l, 2] = 1.0
            ja[l, 3 : 3 + l + 1] = 1.0
            # rotating dof k swings origin_l about the pivot of k
            for k in range(l):
                pivot = origins[k]
                r = origins[l] - pivot
                jo[l, 0, 3 + k] = -r[1]
                jo[l, 1, 3 + k] = r[0]
            r = origins[l] - dofs[:2]
            jo[l, 0, 2] = -r[1]
            jo[l, 1, 2] = r[0]
        return jo, ja

    def sdf(self, dofs, p):
        """(signed distance, outward normal, owning link) at point p."""
        origins, angles = self.frames(dofs)
        best = (np.inf, np.zeros(2), -1)
        for l in range(self.n_joints):
            a = origins[l]
            b = a + self.link_lengths[l] * np.array(
                [np.cos(angles[l]), np.sin(angles[l])]
            )
            e = b - a
            t = np.clip(np.dot(p - a, e) / np.dot(e, e), 0.0, 1.0)
            dvec = p - (a + t * e)
            dn = np.linalg.norm(dvec)
            dist = dn - self.link_radii[l]
            if dist < best[0]:
                n = dvec / dn if dn > 1e-300 else np.array([0.0, 1.0])
                best = (dist, n, l)
        return best

    def surface_velocity(self, dofs_cur, dofs_next, dt, p, link):
        """Velocity of the material point of `link` currently at p."""
        o_c, a_c = self.frames(dofs_cur)
        o_n, a_n = self.frames(dofs_next)
        rel = p - o_c[link]
        ca, sa = np.cos(a_c[link]), np.sin(a_c[link])
        local = np.array([ca * rel[0] + sa * rel[1], -sa * rel[0] + ca * rel[1]])
        cn, sn = np.cos(a_n[link]), np.sin(a_n[link])
        moved = o_n[link] + np.array(
            [cn * local[0] - sn * local[1], sn * local[0] + cn * local[1]]
        )
        return (moved - p) / dt

    def hand_sdf(self, dofs, p, dofs_next=None, dt=1.0):
        """Public query: (distance, outward normal, surface velocity at p).

        A static hand (dofs_next omitted or equal) has zero surface velocity.
        """
        dist, n, link = self.sdf(dofs, p)
        if dofs_next is None:
            vel = np.zeros(2)
        else:
            vel = self.surface_velocity(dofs, dofs_next, dt, p, link)
        return dist, n, vel

    def surface_points(self, dofs, per_link=24):
        """Deterministic points on the capsule boundaries (for observations)."""
        origins, angles = self.frames(dofs)
        pts = []
        for l in range(self.n_joints):
            a = origins[l]
            d = np.array([np.cos(angles[l]), np.sin(angles[l])])
            perp = np.array([-d[1], d[0]])
            b = a + self.link_lengths[l] * d
            r = self.link_radii[l]
            half = per_link // 2
            ts = np.linspace(0.0, 1.0, half)
            for t in ts:
                pts.append(a + t * (b - a) + r * perp)
                pts.append(a + t * (b - a) - r * perp)
        return np.array(pts)

    def aabb(self, dofs, pad=0.0):
        """Axis-aligned bound over all capsules (for contact culling)."""
        origins, angles = self.frames(dofs)
        ends = origins + self.link_lengths[:, None] * np.stack(
            [np.cos(angles), np.sin(angles)], axis=1
        )
        allp = np.vstack([origins, ends])
        r = self.link_radii.max() + pad
        return allp.min(axis=0) - r, allp.max(axis=0) + r


def grid_boundary(v, dist, normal, surf_vel, mu, band):
    """Coulomb projection of one grid-node velocity against a contact.

    Outside the influence band the velocity is untouched. At or below the
    surface (dist <= 0) the relative velocity loses its inward normal
    component and the tangential part is scaled by the Coulomb cone; mu=inf
    means sticky (node takes the surface velocity). Across (0, band] the
    projection fades linearly so the contact map is continuous, which keeps
    action gradients finite-difference checkable.
    """
    v = np.asarray(v, dtype=np.float64)
    surf_vel = np.asarray(surf_vel, dtype=np.float64)
    if dist > band:
        return v.copy()
    infl = 1.0 - dist / band if dist > 0.0 else 1.0
    if np.isinf(mu):
        proj = surf_vel.copy()
    else:
        u = v - surf_vel
        un = float(np.dot(normal, u))
        if un >= 0.0:
            proj = v.copy()
        else:
            ut = u - un * np.asarray(normal)
            utn = float(np.linalg.norm(ut))
            if utn > 1e-300:
                ut = max(0.0, 1.0 + mu * un / utn) * ut
            else:
                ut = np.zeros(2)
            proj = surf_vel + ut
    return v + infl * (proj - v)
