"""Single-threaded numba kernels for one MLS-MPM substep and its adjoints.

One substep is three phases, each with a handwritten reverse-mode twin:

  p2g:  particle -> grid scatter of mass and APIC momentum, with fixed
        corotated stress fused into the affine term (quadratic B-splines).
  grid: momentum -> velocity, gravity, CFL velocity clamp, then boundary
        projections (hand capsules with Coulomb friction, ground, borders).
  g2p:  grid -> particle gather (APIC), advection with position clamp,
        deformation-gradient update with von Mises return mapping on the
        singular values (Hencky strain).

Branch decisions (contact band, friction cone, yield, clamps) are recomputed
in the backward kernels and treated as constant, which is the standard
subgradient choice for this family of simulators.
"""

import math

import numpy as np
from numba import njit

# fraction of dx/dt a grid velocity may reach before clamping
VMAX_FACTOR = 0.8
# singular values are clamped here before the log (matches dough sims)
SIG_MIN = 0.05


@njit(cache=True)
def p2g_fwd(x, v, F, C, mass, vol0, mu, lam, dt, inv_dx, gm, gmom):
    n = x.shape[0]
    G = gm.shape[0]
    gm[:, :] = 0.0
    gmom[:, :, :] = 0.0
    dx = 1.0 / inv_dx
    coef = -dt * 4.0 * inv_dx * inv_dx
    for p in range(n):
        xs0 = x[p, 0] * inv_dx
        xs1 = x[p, 1] * inv_dx
        b0 = int(math.floor(xs0 - 0.5))
        b1 = int(math.floor(xs1 - 0.5))
        f0 = xs0 - b0
        f1 = xs1 - b1
        w00 = 0.5 * (1.5 - f0) ** 2
        w01 = 0.75 - (f0 - 1.0) ** 2
        w02 = 0.5 * (f0 - 0.5) ** 2
        w10 = 0.5 * (1.5 - f1) ** 2
        w11 = 0.75 - (f1 - 1.0) ** 2
        w12 = 0.5 * (f1 - 0.5) ** 2

        a = F[p, 0, 0]
        b = F[p, 0, 1]
        c = F[p, 1, 0]
        d = F[p, 1, 1]
        # polar rotation R = [[al,-be],[be,al]] / r
        al = a + d
        be = c - b
        r = math.sqrt(al * al + be * be)
        r00 = al / r
        r01 = -be / r
        r10 = be / r
        r11 = al / r
        # S = 2 mu (F - R) F^T + lam J (J - 1) I
        m2 = 2.0 * mu[p]
        j = a * d - b * c
        jt = lam[p] * j * (j - 1.0)
        s00 = m2 * ((a - r00) * a + (b - r01) * b) + jt
        s01 = m2 * ((a - r00) * c + (b - r01) * d)
        s10 = m2 * ((c - r10) * a + (d - r11) * b)
        s11 = m2 * ((c - r10) * c + (d - r11) * d) + jt
        cs = coef * vol0[p]
        a00 = cs * s00 + mass[p] * C[p, 0, 0]
        a01 = cs * s01 + mass[p] * C[p, 0, 1]
        a10 = cs * s10 + mass[p] * C[p, 1, 0]
        a11 = cs * s11 + mass[p] * C[p, 1, 1]

        mv0 = mass[p] * v[p, 0]
        mv1 = mass[p] * v[p, 1]
        for i in range(3):
            wx = w00 if i == 0 else (w01 if i == 1 else w02)
            dp0 = (i - f0) * dx
            gi = b0 + i
            for jj in range(3):
                wy = w10 if jj == 0 else (w11 if jj == 1 else w12)
                w = wx * wy
                dp1 = (jj - f1) * dx
                gj = b1 + jj
                gm[gi, gj] += w * mass[p]
                gmom[gi, gj, 0] += w * (mv0 + a00 * dp0 + a01 * dp1)
                gmom[gi, gj, 1] += w * (mv1 + a10 * dp0 + a11 * dp1)


@njit(cache=True)
def p2g_bwd(x, v, F, C, mass, vol0, mu, lam, dt, inv_dx, gm_bar, gmom_bar,
            x_bar, v_bar, F_bar, C_bar):
    n = x.shape[0]
    dx = 1.0 / inv_dx
    coef = -dt * 4.0 * inv_dx * inv_dx
    for p in range(n):
        xs0 = x[p, 0] * inv_dx
        xs1 = x[p, 1] * inv_dx
        b0 = int(math.floor(xs0 - 0.5))
        b1 = int(math.floor(xs1 - 0.5))
        f0 = xs0 - b0
        f1 = xs1 - b1
        w0 = (0.5 * (1.5 - f0) ** 2, 0.75 - (f0 - 1.0) ** 2, 0.5 * (f0 - 0.5) ** 2)
        w1 = (0.5 * (1.5 - f1) ** 2, 0.75 - (f1 - 1.0) ** 2, 0.5 * (f1 - 0.5) ** 2)
        dw0 = (f0 - 1.5, -2.0 * (f0 - 1.0), f0 - 0.5)
        dw1 = (f1 - 1.5, -2.0 * (f1 - 1.0), f1 - 0.5)

        a = F[p, 0, 0]
        b = F[p, 0, 1]
        c = F[p, 1, 0]
        d = F[p, 1, 1]
        al = a + d
        be = c - b
        r = math.sqrt(al * al + be * be)
        r00 = al / r
        r01 = -be / r
        r10 = be / r
        r11 = al / r
        m2 = 2.0 * mu[p]
        j = a * d - b * c
        jt = lam[p] * j * (j - 1.0)
        s00 = m2 * ((a - r00) * a + (b - r01) * b) + jt
        s01 = m2 * ((a - r00) * c + (b - r01) * d)
        s10 = m2 * ((c - r10) * a + (d - r11) * b)
        s11 = m2 * ((c - r10) * c + (d - r11) * d) + jt
        cs = coef * vol0[p]
        a00 = cs * s00 + mass[p] * C[p, 0, 0]
        a01 = cs * s01 + mass[p] * C[p, 0, 1]
        a10 = cs * s10 + mass[p] * C[p, 1, 0]
        a11 = cs * s11 + mass[p] * C[p, 1, 1]
        mv0 = mass[p] * v[p, 0]
        mv1 = mass[p] * v[p, 1]

        ab00 = 0.0
        ab01 = 0.0
        ab10 = 0.0
        ab11 = 0.0
        xb0 = 0.0
        xb1 = 0.0
        for i in range(3):
            wx = w0[i]
            dwx = dw0[i]
            dp0 = (i - f0) * dx
            gi = b0 + i
            for jj in range(3):
                wy = w1[jj]
                dwy = dw1[jj]
                w = wx * wy
                dp1 = (jj - f1) * dx
                gj = b1 + jj
                g0 = gmom_bar[gi, gj, 0]
                g1 = gmom_bar[gi, gj, 1]
                mom0 = mv0 + a00 * dp0 + a01 * dp1
                mom1 = mv1 + a10 * dp0 + a11 * dp1
                wbar = mom0 * g0 + mom1 * g1 + mass[p] * gm_bar[gi, gj]
                v_bar[p, 0] += w * mass[p] * g0
                v_bar[p, 1] += w * mass[p] * g1
                ab00 += w * g0 * dp0
                ab01 += w * g0 * dp1
                ab10 += w * g1 * dp0
                ab11 += w * g1 * dp1
                dpb0 = w * (a00 * g0 + a10 * g1)
                dpb1 = w * (a01 * g0 + a11 * g1)
                # dpos = (i - f)*dx and f = x*inv_dx - base
                xb0 += -dpb0 + inv_dx * dwx * wy * wbar
                xb1 += -dpb1 + inv_dx * wx * dwy * wbar
        x_bar[p, 0] += xb0
        x_bar[p, 1] += xb1

        C_bar[p, 0, 0] += mass[p] * ab00
        C_bar[p, 0, 1] += mass[p] * ab01
        C_bar[p, 1, 0] += mass[p] * ab10
        C_bar[p, 1, 1] += mass[p] * ab11

        sb00 = cs * ab00
        sb01 = cs * ab01
        sb10 = cs * ab10
        sb11 = cs * ab11
        # S = m2 (F F^T - R F^T) + jt I
        # F F^T term: Fbar += m2 (Sbar + Sbar^T) F
        fb00 = m2 * (2.0 * sb00 * a + (sb01 + sb10) * c)
        fb01 = m2 * (2.0 * sb00 * b + (sb01 + sb10) * d)
        fb10 = m2 * ((sb10 + sb01) * a + 2.0 * sb11 * c)
        fb11 = m2 * ((sb10 + sb01) * b + 2.0 * sb11 * d)
        # -R F^T term: Rbar = -m2 Sbar F ; Fbar += -m2 Sbar^T R
        rb00 = -m2 * (sb00 * a + sb01 * c)
        rb01 = -m2 * (sb00 * b + sb01 * d)
        rb10 = -m2 * (sb10 * a + sb11 * c)
        rb11 = -m2 * (sb10 * b + sb11 * d)
        fb00 += -m2 * (sb00 * r00 + sb10 * r10)
        fb01 += -m2 * (sb00 * r01 + sb10 * r11)
        fb10 += -m2 * (sb01 * r00 + sb11 * r10)
        fb11 += -m2 * (sb01 * r01 + sb11 * r11)
        # R = M / r with M = [[al,-be],[be,al]]
        mb00 = rb00 / r
        mb01 = rb01 / r
        mb10 = rb10 / r
        mb11 = rb11 / r
        sdot = (rb00 * r00 + rb01 * r01 + rb10 * r10 + rb11 * r11) / r
        albar = mb00 + mb11 - sdot * al / r
        bebar = mb10 - mb01 - sdot * be / r
        fb00 += albar
        fb11 += albar
        fb10 += bebar
        fb01 -= bebar
        # jt = lam j (j-1)
        jbar = lam[p] * (2.0 * j - 1.0) * (sb00 + sb11)
        fb00 += jbar * d
        fb01 += -jbar * c
        fb10 += -jbar * b
        fb11 += jbar * a
        F_bar[p, 0, 0] += fb00
        F_bar[p, 0, 1] += fb01
        F_bar[p, 1, 0] += fb10
        F_bar[p, 1, 1] += fb11


@njit(cache=True)
def _capsule_dist(px, py, ax, ay, alpha, length, radius):
    """Distance and geometry helpers for one capsule (t is raw, unclamped)."""
    ex = length * math.cos(alpha)
    ey = length * math.sin(alpha)
    ee = ex * ex + ey * ey
    t_raw = ((px - ax) * ex + (py - ay) * ey) / ee
    t = min(max(t_raw, 0.0), 1.0)
    cx = ax + t * ex
    cy = ay + t * ey
    dvx = px - cx
    dvy = py - cy
    dn = math.sqrt(dvx * dvx + dvy * dvy)
    return dn - radius, t_raw, dn, dvx, dvy


@njit(cache=True)
def grid_fwd(gm, gmom, gv, dx, dt, grav_x, grav_y, vmax, gravity_on,
             ground_on, ground_h, mu_ground, border_on,
             contact_on, band, mu_hand,
             lox, loy, lal, lox2, loy2, lal2, llen, lrad):
    G = gm.shape[0]
    L = lox.shape[0]
    nb = 3  # border band in cells
    for i in range(G):
        for jj in range(G):
            if gm[i, jj] <= 0.0:
                gv[i, jj, 0] = 0.0
                gv[i, jj, 1] = 0.0
                continue
            v0 = gmom[i, jj, 0] / gm[i, jj]
            v1 = gmom[i, jj, 1] / gm[i, jj]
            if gravity_on:
                v0 += dt * grav_x
                v1 += dt * grav_y
            v0 = min(max(v0, -vmax), vmax)
            v1 = min(max(v1, -vmax), vmax)
            px = i * dx
            py = jj * dx

            if contact_on and L > 0:
                best = 1e30
                owner = -1
                for l in range(L):
                    dist, _, _, _, _ = _capsule_dist(
                        px, py, lox[l], loy[l], lal[l], llen[l], lrad[l]
                    )
                    if dist < best:
                        best = dist
                        owner = l
                if best <= band:
                    l = owner
                    dist, t_raw, dn, dvx, dvy = _capsule_dist(
                        px, py, lox[l], loy[l], lal[l], llen[l], lrad[l]
                    )
                    if dn > 1e-300:
                        nx = dvx / dn
                        ny = dvy / dn
                    else:
                        nx = 0.0
                        ny = 1.0
                    # full projection inside the surface, fading to zero at
                    # the band edge so the contact map stays continuous
                    infl = 1.0 - dist / band if dist > 0.0 else 1.0
                    # surface velocity of the owning link's material point
                    ca = math.cos(lal[l])
                    sa = math.sin(lal[l])
                    relx = px - lox[l]
                    rely = py - loy[l]
                    plx = ca * relx + sa * rely
                    ply = -sa * relx + ca * rely
                    cn = math.cos(lal2[l])
                    sn = math.sin(lal2[l])
                    vsx = (lox2[l] + cn * plx - sn * ply - px) / dt
                    vsy = (loy2[l] + sn * plx + cn * ply - py) / dt
                    if mu_hand == np.inf:
                        vp0 = vsx
                        vp1 = vsy
                    else:
                        vp0 = v0
                        vp1 = v1
                        ux = v0 - vsx
                        uy = v1 - vsy
                        un = nx * ux + ny * uy
                        if un < 0.0:
                            utx = ux - un * nx
                            uty = uy - un * ny
                            utn = math.sqrt(utx * utx + uty * uty)
                            if utn > 1e-300:
                                scale = 1.0 + mu_hand * un / utn
                                if scale < 0.0:
                                    scale = 0.0
                                utx *= scale
                                uty *= scale
                            else:
                                utx = 0.0
                                uty = 0.0
                            vp0 = vsx + utx
                            vp1 = vsy + uty
                    v0 = v0 + infl * (vp0 - v0)
                    v1 = v1 + infl * (vp1 - v1)

            if ground_on and py <= ground_h:
                if mu_ground < 0.0:
                    v0 = 0.0
                    v1 = 0.0
                elif v1 < 0.0:
                    utn = abs(v0)
                    if utn > 1e-300:
                        scale = 1.0 + mu_ground * v1 / utn
                        if scale < 0.0:
                            scale = 0.0
                        v0 *= scale
                    else:
                        v0 = 0.0
                    v1 = 0.0

            if border_on:
                if i < nb and v0 < 0.0:
                    v0 = 0.0
                if i >= G - nb and v0 > 0.0:
                    v0 = 0.0
                if jj < nb and v1 < 0.0:
                    v1 = 0.0
                if jj >= G - nb and v1 > 0.0:
                    v1 = 0.0

            gv[i, jj, 0] = v0
            gv[i, jj, 1] = v1


@njit(cache=True)
def grid_bwd(gm, gmom, gv_bar, dx, dt, grav_x, grav_y, vmax, gravity_on,
             ground_on, ground_h, mu_ground, border_on,
             contact_on, band, mu_hand,
             lox, loy, lal, lox2, loy2, lal2, llen, lrad,
             gm_bar, gmom_bar,
             lox_bar, loy_bar, lal_bar, lox2_bar, loy2_bar, lal2_bar):
    G = gm.shape[0]
    L = lox.shape[0]
    nb = 3
    gm_bar[:, :] = 0.0
    gmom_bar[:, :, :] = 0.0
    for i in range(G):
        for jj in range(G):
            if gm[i, jj] <= 0.0:
                continue
            # ---- recompute forward chain, remembering branch state
            v0 = gmom[i, jj, 0] / gm[i, jj]
            v1 = gmom[i, jj, 1] / gm[i, jj]
            if gravity_on:
                v0 += dt * grav_x
                v1 += dt * grav_y
            pre0 = v0
            pre1 = v1
            v0 = min(max(v0, -vmax), vmax)
            v1 = min(max(v1, -vmax), vmax)
            clamp0 = pre0 > -vmax and pre0 < vmax
            clamp1 = pre1 > -vmax and pre1 < vmax
            px = i * dx
            py = jj * dx

            # contact branch state
            hand_mode = 0  # 0 none, 1 sticky, 2 coulomb (un<0), 3 inside+free
            owner = -1
            nx = 0.0
            ny = 1.0
            vsx = 0.0
            vsy = 0.0
            un = 0.0
            utx0 = 0.0
            uty0 = 0.0
            utn = 0.0
            scale = 1.0
            t_raw = 0.0
            dn = 0.0
            dvx = 0.0
            dvy = 0.0
            plx = 0.0
            ply = 0.0
            dist = 0.0
            infl = 0.0
            vp0 = 0.0
            vp1 = 0.0
            hv0 = v0  # velocity entering the hand stage
            hv1 = v1
            if contact_on and L > 0:
                best = 1e30
                for l in range(L):
                    dl, _, _, _, _ = _capsule_dist(
                        px, py, lox[l], loy[l], lal[l], llen[l], lrad[l]
                    )
                    if dl < best:
                        best = dl
                        owner = l
                if best <= band:
                    l = owner
                    dist, t_raw, dn, dvx, dvy = _capsule_dist(
                        px, py, lox[l], loy[l], lal[l], llen[l], lrad[l]
                    )
                    if dn > 1e-300:
                        nx = dvx / dn
                        ny = dvy / dn
                    infl = 1.0 - dist / band if dist > 0.0 else 1.0
                    ca = math.cos(lal[l])
                    sa = math.sin(lal[l])
                    relx = px - lox[l]
                    rely = py - loy[l]
                    plx = ca * relx + sa * rely
                    ply = -sa * relx + ca * rely
                    cn = math.cos(lal2[l])
                    sn = math.sin(lal2[l])
                    vsx = (lox2[l] + cn * plx - sn * ply - px) / dt
                    vsy = (loy2[l] + sn * plx + cn * ply - py) / dt
                    if mu_hand == np.inf:
                        hand_mode = 1
                        vp0 = vsx
                        vp1 = vsy
                    else:
                        ux = hv0 - vsx
                        uy = hv1 - vsy
                        un = nx * ux + ny * uy
                        if un < 0.0:
                            hand_mode = 2
                            utx0 = ux - un * nx
                            uty0 = uy - un * ny
                            utn = math.sqrt(utx0 * utx0 + uty0 * uty0)
                            scale = 0.0
                            if utn > 1e-300:
                                scale = 1.0 + mu_hand * un / utn
                                if scale < 0.0:
                                    scale = 0.0
                            vp0 = vsx + scale * utx0
                            vp1 = vsy + scale * uty0
                        else:
                            hand_mode = 3
                            vp0 = hv0
                            vp1 = hv1
                    v0 = hv0 + infl * (vp0 - hv0)
                    v1 = hv1 + infl * (vp1 - hv1)
            gv0 = v0  # velocity entering the ground stage
            gv1 = v1
            ground_mode = 0
            gutn = 0.0
            gscale = 1.0
            if ground_on and py <= ground_h:
                if mu_ground < 0.0:
                    ground_mode = 2
                    v0 = 0.0
                    v1 = 0.0
                elif v1 < 0.0:
                    ground_mode = 1
                    gutn = abs(v0)
                    gscale = 0.0
                    if gutn > 1e-300:
                        gscale = 1.0 + mu_ground * v1 / gutn
                        if gscale < 0.0:
                            gscale = 0.0
                    v0 = v0 * gscale
                    v1 = 0.0
            b0keep = True
            b1keep = True
            if border_on:
                if (i < nb and v0 < 0.0) or (i >= G - nb and v0 > 0.0):
                    b0keep = False
                if (jj < nb and v1 < 0.0) or (jj >= G - nb and v1 > 0.0):
                    b1keep = False

            # ---- reverse sweep
            ob0 = gv_bar[i, jj, 0]
            ob1 = gv_bar[i, jj, 1]
            if border_on:
                if not b0keep:
                    ob0 = 0.0
                if not b1keep:
                    ob1 = 0.0
            # ground stage used (gv0, gv1)
            if ground_mode == 2:
                ob0 = 0.0
                ob1 = 0.0
            elif ground_mode == 1:
                # out0 = gv0 * gscale, out1 = 0; gscale = f(gv0, gv1)
                gsb = ob0 * gv0
                in0 = ob0 * gscale
                in1 = 0.0
                if gscale > 0.0 and gutn > 1e-300:
                    # gscale = 1 + mu*gv1/|gv0|
                    in1 += gsb * mu_ground / gutn
                    sgn = 1.0 if gv0 > 0.0 else -1.0
                    in0 += gsb * (-mu_ground * gv1 / (gutn * gutn)) * sgn
                ob0 = in0
                ob1 = in1
            # hand stage used (hv0, hv1); out = hv + infl*(vp - hv)
            if hand_mode > 0:
                vpb0 = infl * ob0
                vpb1 = infl * ob1
                inflb = (vp0 - hv0) * ob0 + (vp1 - hv1) * ob1
                hvb0 = (1.0 - infl) * ob0
                hvb1 = (1.0 - infl) * ob1
                vsb0 = 0.0
                vsb1 = 0.0
                nxb = 0.0
                nyb = 0.0
                if hand_mode == 1:
                    vsb0 += vpb0
                    vsb1 += vpb1
                elif hand_mode == 3:
                    hvb0 += vpb0
                    hvb1 += vpb1
                else:
                    # vp = vs + scale*ut(u, n); u = hv - vs
                    vsb0 += vpb0
                    vsb1 += vpb1
                    scb = vpb0 * utx0 + vpb1 * uty0
                    utb0 = scale * vpb0
                    utb1 = scale * vpb1
                    unb = 0.0
                    if scale > 0.0 and utn > 1e-300:
                        unb += scb * mu_hand / utn
                        utnb = -scb * mu_hand * un / (utn * utn)
                        utb0 += utnb * utx0 / utn
                        utb1 += utnb * uty0 / utn
                    # ut = u - un n
                    ub0 = utb0
                    ub1 = utb1
                    unb += -(nx * utb0 + ny * utb1)
                    nxb += -un * utb0
                    nyb += -un * utb1
                    # un = n . u
                    ux = hv0 - vsx
                    uy = hv1 - vsy
                    ub0 += unb * nx
                    ub1 += unb * ny
                    nxb += unb * ux
                    nyb += unb * uy
                    # u = hv - vs
                    hvb0 += ub0
                    hvb1 += ub1
                    vsb0 -= ub0
                    vsb1 -= ub1
                ob0 = hvb0
                ob1 = hvb1
                l = owner
                # ---- vs geometry (cur + next pose of owner)
                if vsb0 != 0.0 or vsb1 != 0.0:
                    lox2_bar[l] += vsb0 / dt
                    loy2_bar[l] += vsb1 / dt
                    cn = math.cos(lal2[l])
                    sn = math.sin(lal2[l])
                    # moved = o2 + R(a2) pl; d/da2 R = [[-sn,-cn],[cn,-sn]]
                    lal2_bar[l] += (
                        vsb0 * (-sn * plx - cn * ply) + vsb1 * (cn * plx - sn * ply)
                    ) / dt
                    plb0 = (cn * vsb0 + sn * vsb1) / dt
                    plb1 = (-sn * vsb0 + cn * vsb1) / dt
                    ca = math.cos(lal[l])
                    sa = math.sin(lal[l])
                    relbx = ca * plb0 - sa * plb1
                    relby = sa * plb0 + ca * plb1
                    relx = px - lox[l]
                    rely = py - loy[l]
                    lal_bar[l] += plb0 * (-sa * relx + ca * rely) + plb1 * (
                        -ca * relx - sa * rely
                    )
                    lox_bar[l] -= relbx
                    loy_bar[l] -= relby
                # ---- distance through the influence fade
                dnb = 0.0
                if dist > 0.0:
                    dnb += -inflb / band  # dist = dn - r
                # ---- normal + distance geometry share dvec = p - closest
                if (nxb != 0.0 or nyb != 0.0 or dnb != 0.0) and dn > 1e-300:
                    ndot = dvx * nxb + dvy * nyb
                    dvb0 = nxb / dn - dvx * ndot / (dn * dn * dn) + dnb * dvx / dn
                    dvb1 = nyb / dn - dvy * ndot / (dn * dn * dn) + dnb * dvy / dn
                    cpb0 = -dvb0
                    cpb1 = -dvb1
                    ex = llen[l] * math.cos(lal[l])
                    ey = llen[l] * math.sin(lal[l])
                    ee = ex * ex + ey * ey
                    t = min(max(t_raw, 0.0), 1.0)
                    # cp = A + t e
                    ab0 = cpb0
                    ab1 = cpb1
                    eb0 = t * cpb0
                    eb1 = t * cpb1
                    tb = ex * cpb0 + ey * cpb1
                    if 0.0 < t_raw < 1.0:
                        s = (px - lox[l]) * ex + (py - loy[l]) * ey
                        sb = tb / ee
                        eeb = -tb * s / (ee * ee)
                        ab0 += -sb * ex
                        ab1 += -sb * ey
                        eb0 += sb * (px - lox[l]) + 2.0 * eeb * ex
                        eb1 += sb * (py - loy[l]) + 2.0 * eeb * ey
                    # e = len * dir(alpha); A = o
                    lal_bar[l] += llen[l] * (-math.sin(lal[l]) * eb0
                                             + math.cos(lal[l]) * eb1)
                    lox_bar[l] += ab0
                    loy_bar[l] += ab1
            # mode 0 passes ob through untouched
            if not clamp0:
                ob0 = 0.0
            if not clamp1:
                ob1 = 0.0
            # gravity add is identity; v = mom/m
            gmom_bar[i, jj, 0] = ob0 / gm[i, jj]
            gmom_bar[i, jj, 1] = ob1 / gm[i, jj]
            mv0 = gmom[i, jj, 0] / gm[i, jj]
            mv1 = gmom[i, jj, 1] / gm[i, jj]
            gm_bar[i, jj] = -(mv0 * ob0 + mv1 * ob1) / gm[i, jj]


@njit(cache=True)
def g2p_fwd(x, F, gv, dt, inv_dx, mu, yield_stress, lo_clamp, hi_clamp,
            x2, v2, F2, C2):
    n = x.shape[0]
    dx = 1.0 / inv_dx
    status = -1
    for p in range(n):
        xs0 = x[p, 0] * inv_dx
        xs1 = x[p, 1] * inv_dx
        b0 = int(math.floor(xs0 - 0.5))
        b1 = int(math.floor(xs1 - 0.5))
        f0 = xs0 - b0
        f1 = xs1 - b1
        w0 = (0.5 * (1.5 - f0) ** 2, 0.75 - (f0 - 1.0) ** 2, 0.5 * (f0 - 0.5) ** 2)
        w1 = (0.5 * (1.5 - f1) ** 2, 0.75 - (f1 - 1.0) ** 2, 0.5 * (f1 - 0.5) ** 2)
        nv0 = 0.0
        nv1 = 0.0
        b00 = 0.0
        b01 = 0.0
        b10 = 0.0
        b11 = 0.0
        for i in range(3):
            wx = w0[i]
            dp0 = (i - f0) * dx
            gi = b0 + i
            for jj in range(3):
                w = wx * w1[jj]
                dp1 = (jj - f1) * dx
                gj = b1 + jj
                gv0 = gv[gi, gj, 0]
                gv1 = gv[gi, gj, 1]
                nv0 += w * gv0
                nv1 += w * gv1
                b00 += w * gv0 * dp0
                b01 += w * gv0 * dp1
                b10 += w * gv1 * dp0
                b11 += w * gv1 * dp1
        k = 4.0 * inv_dx * inv_dx
        c00 = k * b00
        c01 = k * b01
        c10 = k * b10
        c11 = k * b11
        v2[p, 0] = nv0
        v2[p, 1] = nv1
        C2[p, 0, 0] = c00
        C2[p, 0, 1] = c01
        C2[p, 1, 0] = c10
        C2[p, 1, 1] = c11
        x2[p, 0] = min(max(x[p, 0] + dt * nv0, lo_clamp), hi_clamp)
        x2[p, 1] = min(max(x[p, 1] + dt * nv1, lo_clamp), hi_clamp)

        # F trial then von Mises return mapping on singular values
        ft00 = (1.0 + dt * c00) * F[p, 0, 0] + dt * c01 * F[p, 1, 0]
        ft01 = (1.0 + dt * c00) * F[p, 0, 1] + dt * c01 * F[p, 1, 1]
        ft10 = dt * c10 * F[p, 0, 0] + (1.0 + dt * c11) * F[p, 1, 0]
        ft11 = dt * c10 * F[p, 0, 1] + (1.0 + dt * c11) * F[p, 1, 1]
        E = (ft00 + ft11) * 0.5
        H = (ft10 - ft01) * 0.5
        Fv = (ft00 - ft11) * 0.5
        Gv = (ft10 + ft01) * 0.5
        Q = math.sqrt(E * E + H * H)
        R = math.sqrt(Fv * Fv + Gv * Gv)
        sx = Q + R
        sy = Q - R
        s1 = max(sx, SIG_MIN)
        s2 = max(sy, SIG_MIN)
        e1 = math.log(s1)
        e2 = math.log(s2)
        eh1 = (e1 - e2) * 0.5
        eh2 = (e2 - e1) * 0.5
        en = math.sqrt(eh1 * eh1 + eh2 * eh2)
        dgamma = en - yield_stress[p] / (2.0 * mu[p])
        if dgamma > 0.0 and en > 1e-12:
            ratio = dgamma / en
            ne1 = e1 - ratio * eh1
            ne2 = e2 - ratio * eh2
            ns1 = math.exp(ne1)
            ns2 = math.exp(ne2)
            a1 = math.atan2(Gv, Fv)
            a2 = math.atan2(H, E)
            uang = (a1 + a2) * 0.5
            vang = (a1 - a2) * 0.5
            cu = math.cos(uang)
            su = math.sin(uang)
            cv = math.cos(vang)
            sv = math.sin(vang)
            F2[p, 0, 0] = cu * cv * ns1 + su * sv * ns2
            F2[p, 0, 1] = cu * sv * ns1 - su * cv * ns2
            F2[p, 1, 0] = su * cv * ns1 - cu * sv * ns2
            F2[p, 1, 1] = su * sv * ns1 + cu * cv * ns2
        else:
            F2[p, 0, 0] = ft00
            F2[p, 0, 1] = ft01
            F2[p, 1, 0] = ft10
            F2[p, 1, 1] = ft11
        detf = F2[p, 0, 0] * F2[p, 1, 1] - F2[p, 0, 1] * F2[p, 1, 0]
        if status < 0 and (
            not math.isfinite(x2[p, 0] + x2[p, 1] + nv0 + nv1 + detf) or detf <= 0.0
        ):
            status = p
    return status


@njit(cache=True)
def g2p_bwd(x, F, gv, dt, inv_dx, mu, yield_stress, lo_clamp, hi_clamp,
            x2_bar, v2_bar, F2_bar, C2_bar, x_bar, F_bar, gv_bar):
    n = x.shape[0]
    dx = 1.0 / inv_dx
    gv_bar[:, :, :] = 0.0
    for p in range(n):
        xs0 = x[p, 0] * inv_dx
        xs1 = x[p, 1] * inv_dx
        b0 = int(math.floor(xs0 - 0.5))
        b1 = int(math.floor(xs1 - 0.5))
        f0 = xs0 - b0
        f1 = xs1 - b1
        w0 = (0.5 * (1.5 - f0) ** 2, 0.75 - (f0 - 1.0) ** 2, 0.5 * (f0 - 0.5) ** 2)
        w1 = (0.5 * (1.5 - f1) ** 2, 0.75 - (f1 - 1.0) ** 2, 0.5 * (f1 - 0.5) ** 2)
        dw0 = (f0 - 1.5, -2.0 * (f0 - 1.0), f0 - 0.5)
        dw1 = (f1 - 1.5, -2.0 * (f1 - 1.0), f1 - 0.5)
        nv0 = 0.0
        nv1 = 0.0
        b00 = 0.0
        b01 = 0.0
        b10 = 0.0
        b11 = 0.0
        for i in range(3):
            wx = w0[i]
            dp0 = (i - f0) * dx
            gi = b0 + i
            for jj in range(3):
                w = wx * w1[jj]
                dp1 = (jj - f1) * dx
                gj = b1 + jj
                gv0 = gv[gi, gj, 0]
                gv1 = gv[gi, gj, 1]
                nv0 += w * gv0
                nv1 += w * gv1
                b00 += w * gv0 * dp0
                b01 += w * gv0 * dp1
                b10 += w * gv1 * dp0
                b11 += w * gv1 * dp1
        k = 4.0 * inv_dx * inv_dx
        c00 = k * b00
        c01 = k * b01
        c10 = k * b10
        c11 = k * b11
        ft00 = (1.0 + dt * c00) * F[p, 0, 0] + dt * c01 * F[p, 1, 0]
        ft01 = (1.0 + dt * c00) * F[p, 0, 1] + dt * c01 * F[p, 1, 1]
        ft10 = dt * c10 * F[p, 0, 0] + (1.0 + dt * c11) * F[p, 1, 0]
        ft11 = dt * c10 * F[p, 0, 1] + (1.0 + dt * c11) * F[p, 1, 1]
        E = (ft00 + ft11) * 0.5
        H = (ft10 - ft01) * 0.5
        Fv = (ft00 - ft11) * 0.5
        Gv = (ft10 + ft01) * 0.5
        Q = math.sqrt(E * E + H * H)
        R = math.sqrt(Fv * Fv + Gv * Gv)
        sx = Q + R
        sy = Q - R
        s1 = max(sx, SIG_MIN)
        s2 = max(sy, SIG_MIN)
        e1 = math.log(s1)
        e2 = math.log(s2)
        eh1 = (e1 - e2) * 0.5
        eh2 = (e2 - e1) * 0.5
        en = math.sqrt(eh1 * eh1 + eh2 * eh2)
        dgamma = en - yield_stress[p] / (2.0 * mu[p])
        plastic = dgamma > 0.0 and en > 1e-12

        # ---- adjoint of F2 -> F_trial
        fb2_00 = F2_bar[p, 0, 0]
        fb2_01 = F2_bar[p, 0, 1]
        fb2_10 = F2_bar[p, 1, 0]
        fb2_11 = F2_bar[p, 1, 1]
        if plastic:
            ratio = dgamma / en
            ne1 = e1 - ratio * eh1
            ne2 = e2 - ratio * eh2
            ns1 = math.exp(ne1)
            ns2 = math.exp(ne2)
            a1 = math.atan2(Gv, Fv)
            a2 = math.atan2(H, E)
            uang = (a1 + a2) * 0.5
            vang = (a1 - a2) * 0.5
            cu = math.cos(uang)
            su = math.sin(uang)
            cv = math.cos(vang)
            sv = math.sin(vang)
            # F2 = [cu*cv*ns1 + su*sv*ns2, cu*sv*ns1 - su*cv*ns2;
            #       su*cv*ns1 - cu*sv*ns2, su*sv*ns1 + cu*cv*ns2]
            ns1b = (
                fb2_00 * cu * cv + fb2_01 * cu * sv + fb2_10 * su * cv
                + fb2_11 * su * sv
            )
            ns2b = (
                fb2_00 * su * sv - fb2_01 * su * cv - fb2_10 * cu * sv
                + fb2_11 * cu * cv
            )
            ub = (
                fb2_00 * (-su * cv * ns1 + cu * sv * ns2)
                + fb2_01 * (-su * sv * ns1 - cu * cv * ns2)
                + fb2_10 * (cu * cv * ns1 + su * sv * ns2)
                + fb2_11 * (cu * sv * ns1 - su * cv * ns2)
            )
            vb = (
                fb2_00 * (-cu * sv * ns1 + su * cv * ns2)
                + fb2_01 * (cu * cv * ns1 + su * sv * ns2)
                + fb2_10 * (-su * sv * ns1 - cu * cv * ns2)
                + fb2_11 * (su * cv * ns1 - cu * sv * ns2)
            )
            ne1b = ns1b * ns1
            ne2b = ns2b * ns2
            # ne = e - ratio*eh ; ratio = dgamma/en ; dgamma = en - const
            e1b = ne1b
            e2b = ne2b
            ratiob = -(ne1b * eh1 + ne2b * eh2)
            eh1b = -ratio * ne1b
            eh2b = -ratio * ne2b
            dgb = ratiob / en
            enb = -ratiob * dgamma / (en * en)
            enb += dgb
            eh1b += enb * eh1 / en
            eh2b += enb * eh2 / en
            # eh1 = (e1-e2)/2, eh2 = (e2-e1)/2
            e1b += 0.5 * (eh1b - eh2b)
            e2b += 0.5 * (eh2b - eh1b)
            s1b = e1b / s1
            s2b = e2b / s2
            sxb = s1b if sx > SIG_MIN else 0.0
            syb = s2b if sy > SIG_MIN else 0.0
            Qb = sxb + syb
            Rb = sxb - syb
            a1b = 0.5 * (ub + vb)
            a2b = 0.5 * (ub - vb)
            # a1 = atan2(Gv, Fv); a2 = atan2(H, E)
            rr2 = Fv * Fv + Gv * Gv
            qq2 = E * E + H * H
            Gvb = a1b * Fv / rr2
            Fvb = -a1b * Gv / rr2
            Hb = a2b * E / qq2
            Eb = -a2b * H / qq2
            if Q > 1e-300:
                Eb += Qb * E / Q
                Hb += Qb * H / Q
            if R > 1e-300:
                Fvb += Rb * Fv / R
                Gvb += Rb * Gv / R
            ftb00 = 0.5 * (Eb + Fvb)
            ftb11 = 0.5 * (Eb - Fvb)
            ftb10 = 0.5 * (Hb + Gvb)
            ftb01 = 0.5 * (Gvb - Hb)
        else:
            ftb00 = fb2_00
            ftb01 = fb2_01
            ftb10 = fb2_10
            ftb11 = fb2_11

        # F_trial = (I + dt C) F
        cb00 = dt * (ftb00 * F[p, 0, 0] + ftb01 * F[p, 0, 1]) + C2_bar[p, 0, 0]
        cb01 = dt * (ftb00 * F[p, 1, 0] + ftb01 * F[p, 1, 1]) + C2_bar[p, 0, 1]
        cb10 = dt * (ftb10 * F[p, 0, 0] + ftb11 * F[p, 0, 1]) + C2_bar[p, 1, 0]
        cb11 = dt * (ftb10 * F[p, 1, 0] + ftb11 * F[p, 1, 1]) + C2_bar[p, 1, 1]
        F_bar[p, 0, 0] += (1.0 + dt * c00) * ftb00 + dt * c10 * ftb10
        F_bar[p, 0, 1] += (1.0 + dt * c00) * ftb01 + dt * c10 * ftb11
        F_bar[p, 1, 0] += dt * c01 * ftb00 + (1.0 + dt * c11) * ftb10
        F_bar[p, 1, 1] += dt * c01 * ftb01 + (1.0 + dt * c11) * ftb11

        # x2 = clamp(x + dt v2)
        px2 = x[p, 0] + dt * nv0
        py2 = x[p, 1] + dt * nv1
        xb2_0 = x2_bar[p, 0] if (px2 > lo_clamp and px2 < hi_clamp) else 0.0
        xb2_1 = x2_bar[p, 1] if (py2 > lo_clamp and py2 < hi_clamp) else 0.0
        x_bar[p, 0] += xb2_0
        x_bar[p, 1] += xb2_1
        vb0 = v2_bar[p, 0] + dt * xb2_0
        vb1 = v2_bar[p, 1] + dt * xb2_1

        bb00 = k * cb00
        bb01 = k * cb01
        bb10 = k * cb10
        bb11 = k * cb11
        xb0 = 0.0
        xb1 = 0.0
        for i in range(3):
            wx = w0[i]
            dwx = dw0[i]
            dp0 = (i - f0) * dx
            gi = b0 + i
            for jj in range(3):
                wy = w1[jj]
                dwy = dw1[jj]
                w = wx * wy
                dp1 = (jj - f1) * dx
                gj = b1 + jj
                gv0 = gv[gi, gj, 0]
                gv1 = gv[gi, gj, 1]
                gvb0 = w * (vb0 + bb00 * dp0 + bb01 * dp1)
                gvb1 = w * (vb1 + bb10 * dp0 + bb11 * dp1)
                gv_bar[gi, gj, 0] += gvb0
                gv_bar[gi, gj, 1] += gvb1
                wbar = (
                    gv0 * vb0
                    + gv1 * vb1
                    + gv0 * (bb00 * dp0 + bb01 * dp1)
                    + gv1 * (bb10 * dp0 + bb11 * dp1)
                )
                dpb0 = w * (gv0 * bb00 + gv1 * bb10)
                dpb1 = w * (gv0 * bb01 + gv1 * bb11)
                xb0 += -dpb0 + inv_dx * dwx * wy * wbar
                xb1 += -dpb1 + inv_dx * wx * dwy * wbar
        x_bar[p, 0] += xb0
        x_bar[p, 1] += xb1
