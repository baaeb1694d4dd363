"""Numba kernels for planar contact geometry and batched rigid-body stepping.

Body 0 of every environment is the robot; bodies 1..N are the scene objects.
All kernels are scalar per environment so results never depend on batch size.
"""
from math import cos, inf, pi, sin, sqrt

import numpy as np
from numba import njit

POLYGON, DISC = 0, 1

# params layout for step_batch
P_DT, P_DECIM, P_TRACK, P_PD_DECAY, P_MU_GROUND, P_MU_PUSH, P_GRAVITY = 0, 1, 2, 3, 4, 5, 6
P_VEL_ITERS, P_POS_ITERS, P_SLOP = 7, 8, 9
N_PARAMS = 10


@njit(cache=True, nogil=True)
def world_verts(pose, verts, n, out):
    c = cos(pose[2])
    s = sin(pose[2])
    for i in range(n):
        out[i, 0] = c * verts[i, 0] - s * verts[i, 1] + pose[0]
        out[i, 1] = s * verts[i, 0] + c * verts[i, 1] + pose[1]


@njit(cache=True, nogil=True)
def _max_separation(va, na, vb, nb):
    best = -inf
    idx = 0
    for i in range(na):
        j = (i + 1) % na
        ex = va[j, 0] - va[i, 0]
        ey = va[j, 1] - va[i, 1]
        ln = sqrt(ex * ex + ey * ey)
        nx = ey / ln
        ny = -ex / ln
        smin = inf
        for k in range(nb):
            d = nx * (vb[k, 0] - va[i, 0]) + ny * (vb[k, 1] - va[i, 1])
            if d < smin:
                smin = d
        if smin > best:
            best = smin
            idx = i
    return best, idx


@njit(cache=True, nogil=True)
def poly_poly(va, na, vb, nb):
    """Contact between convex CCW polygons.

    Returns (depth, nx, ny, px, py); the normal points from A to B and
    depth < 0 is a separation lower bound.
    """
    sa, ea = _max_separation(va, na, vb, nb)
    sb, eb = _max_separation(vb, nb, va, na)
    if sa > 0.0 or sb > 0.0:
        return -max(sa, sb), 0.0, 0.0, 0.0, 0.0
    if sb > sa + 1e-12:
        ref, nr, inc, ni, e, flip = vb, nb, va, na, eb, True
    else:
        ref, nr, inc, ni, e, flip = va, na, vb, nb, ea, False
    r1x, r1y = ref[e, 0], ref[e, 1]
    j = (e + 1) % nr
    tx = ref[j, 0] - r1x
    ty = ref[j, 1] - r1y
    ln = sqrt(tx * tx + ty * ty)
    tx /= ln
    ty /= ln
    nx, ny = ty, -tx
    # incident edge: most anti-parallel to the reference normal
    best = inf
    ie = 0
    for i in range(ni):
        k = (i + 1) % ni
        ex = inc[k, 0] - inc[i, 0]
        ey = inc[k, 1] - inc[i, 1]
        el = sqrt(ex * ex + ey * ey)
        d = (ey * nx - ex * ny) / el
        if d < best:
            best = d
            ie = i
    i1x, i1y = inc[ie, 0], inc[ie, 1]
    k = (ie + 1) % ni
    i2x, i2y = inc[k, 0], inc[k, 1]
    s1 = tx * (i1x - r1x) + ty * (i1y - r1y)
    s2 = tx * (i2x - r1x) + ty * (i2y - r1y)
    lo, hi = 0.0, 1.0
    ds = s2 - s1
    if abs(ds) > 1e-15:
        a = (0.0 - s1) / ds
        b = (ln - s1) / ds
        if a > b:
            a, b = b, a
        lo = max(lo, a)
        hi = min(hi, b)
        if lo > hi:
            mid = 0.5 * (lo + hi)
            lo = mid
            hi = mid
    sx = 0.0
    sy = 0.0
    cnt = 0
    for q in range(2):
        lam = lo if q == 0 else hi
        px = i1x + lam * (i2x - i1x)
        py = i1y + lam * (i2y - i1y)
        sep = nx * (px - r1x) + ny * (py - r1y)
        if sep <= 0.0:
            sx += px
            sy += py
            cnt += 1
    if cnt == 0:
        # numerically touching: use the closer clipped point
        lam = lo if (nx * (i1x - r1x) + ny * (i1y - r1y)) <= (nx * (i2x - r1x) + ny * (i2y - r1y)) else hi
        sx = i1x + lam * (i2x - i1x)
        sy = i1y + lam * (i2y - i1y)
        cnt = 1
    depth = -max(sa, sb)
    if flip:
        nx, ny = -nx, -ny
    return depth, nx, ny, sx / cnt, sy / cnt


@njit(cache=True, nogil=True)
def poly_disc(va, na, cx, cy, r):
    """Polygon A vs disc B; normal from polygon to disc."""
    best = -inf
    idx = 0
    for i in range(na):
        j = (i + 1) % na
        ex = va[j, 0] - va[i, 0]
        ey = va[j, 1] - va[i, 1]
        ln = sqrt(ex * ex + ey * ey)
        s = (ey * (cx - va[i, 0]) - ex * (cy - va[i, 1])) / ln
        if s > best:
            best = s
            idx = i
    j = (idx + 1) % na
    v1x, v1y = va[idx, 0], va[idx, 1]
    v2x, v2y = va[j, 0], va[j, 1]
    ex = v2x - v1x
    ey = v2y - v1y
    ln = sqrt(ex * ex + ey * ey)
    fnx, fny = ey / ln, -ex / ln
    if best <= 0.0:
        return r - best, fnx, fny, cx - fnx * best, cy - fny * best
    u1 = (cx - v1x) * ex + (cy - v1y) * ey
    u2 = (cx - v2x) * (-ex) + (cy - v2y) * (-ey)
    if u1 <= 0.0 or u2 <= 0.0:
        vx, vy = (v1x, v1y) if u1 <= 0.0 else (v2x, v2y)
        dx = cx - vx
        dy = cy - vy
        d = sqrt(dx * dx + dy * dy)
        if d == 0.0:
            return r, fnx, fny, vx, vy
        return r - d, dx / d, dy / d, vx, vy
    return r - best, fnx, fny, cx - fnx * best, cy - fny * best


@njit(cache=True, nogil=True)
def disc_disc(ax, ay, ra, bx, by, rb):
    dx = bx - ax
    dy = by - ay
    d = sqrt(dx * dx + dy * dy)
    if d == 0.0:
        nx, ny = 1.0, 0.0
    else:
        nx, ny = dx / d, dy / d
    depth = ra + rb - d
    return depth, nx, ny, ax + nx * (ra - 0.5 * depth), ay + ny * (ra - 0.5 * depth)


@njit(cache=True, nogil=True)
def pair_contact(pa, ka, nva, va_local, ra, pb, kb, nvb, vb_local, rb, wa, wb):
    """Generic contact query; wa/wb are (4, 2) scratch buffers."""
    if ka == POLYGON and kb == POLYGON:
        world_verts(pa, va_local, nva, wa)
        world_verts(pb, vb_local, nvb, wb)
        return poly_poly(wa, nva, wb, nvb)
    if ka == POLYGON:
        world_verts(pa, va_local, nva, wa)
        return poly_disc(wa, nva, pb[0], pb[1], rb)
    if kb == POLYGON:
        world_verts(pb, vb_local, nvb, wb)
        d, nx, ny, px, py = poly_disc(wb, nvb, pa[0], pa[1], ra)
        return d, -nx, -ny, px, py
    return disc_disc(pa[0], pa[1], ra, pb[0], pb[1], rb)


@njit(cache=True, nogil=True)
def _bound_radius(kind, nv, verts, rad):
    if kind == DISC:
        return rad
    m = 0.0
    for i in range(nv):
        d = sqrt(verts[i, 0] ** 2 + verts[i, 1] ** 2)
        if d > m:
            m = d
    return m


@njit(cache=True, nogil=True)
def solve_velocities(pose, vel, inv_m, inv_i, kind, nv, verts, rad, bound, mu, iters, contacts, wa, wb):
    """Sequential inelastic impulses with Coulomb friction; never adds kinetic energy.

    ``contacts`` receives pairs that exchanged a nonzero normal impulse.
    """
    nb = pose.shape[0]
    npairs = nb * (nb - 1) // 2
    cdat = np.zeros((npairs, 5))
    cidx = np.zeros((npairs, 2), np.int64)
    nc = 0
    for a in range(nb):
        for b in range(a + 1, nb):
            dx = pose[b, 0] - pose[a, 0]
            dy = pose[b, 1] - pose[a, 1]
            if sqrt(dx * dx + dy * dy) > bound[a] + bound[b] + 1e-6:
                continue
            d, nx, ny, px, py = pair_contact(
                pose[a], kind[a], nv[a], verts[a], rad[a], pose[b], kind[b], nv[b], verts[b], rad[b], wa, wb
            )
            if d >= 0.0:
                cdat[nc, 0] = nx
                cdat[nc, 1] = ny
                cdat[nc, 2] = px
                cdat[nc, 3] = py
                cidx[nc, 0] = a
                cidx[nc, 1] = b
                nc += 1
    acc_n = np.zeros(nc)
    acc_t = np.zeros(nc)
    for _ in range(iters):
        for c in range(nc):
            a = cidx[c, 0]
            b = cidx[c, 1]
            nx, ny, px, py = cdat[c, 0], cdat[c, 1], cdat[c, 2], cdat[c, 3]
            rax = px - pose[a, 0]
            ray = py - pose[a, 1]
            rbx = px - pose[b, 0]
            rby = py - pose[b, 1]
            # normal
            vrx = vel[b, 0] - vel[b, 2] * rby - vel[a, 0] + vel[a, 2] * ray
            vry = vel[b, 1] + vel[b, 2] * rbx - vel[a, 1] - vel[a, 2] * rax
            vn = vrx * nx + vry * ny
            ran = rax * ny - ray * nx
            rbn = rbx * ny - rby * nx
            kn = inv_m[a] + inv_m[b] + inv_i[a] * ran * ran + inv_i[b] * rbn * rbn
            if vn < 0.0 and kn > 0.0:
                lam = -vn / kn
                acc_n[c] += lam
                vel[a, 0] -= inv_m[a] * lam * nx
                vel[a, 1] -= inv_m[a] * lam * ny
                vel[a, 2] -= inv_i[a] * lam * ran
                vel[b, 0] += inv_m[b] * lam * nx
                vel[b, 1] += inv_m[b] * lam * ny
                vel[b, 2] += inv_i[b] * lam * rbn
            # friction
            tx, ty = -ny, nx
            vrx = vel[b, 0] - vel[b, 2] * rby - vel[a, 0] + vel[a, 2] * ray
            vry = vel[b, 1] + vel[b, 2] * rbx - vel[a, 1] - vel[a, 2] * rax
            vt = vrx * tx + vry * ty
            rat = rax * ty - ray * tx
            rbt = rbx * ty - rby * tx
            kt = inv_m[a] + inv_m[b] + inv_i[a] * rat * rat + inv_i[b] * rbt * rbt
            if kt > 0.0 and vt != 0.0:
                full = -vt / kt
                sgn = 1.0 if full > 0.0 else -1.0
                room = mu * acc_n[c] - sgn * acc_t[c]
                if room < 0.0:
                    room = 0.0
                lam = sgn * min(abs(full), room)
                acc_t[c] += lam
                vel[a, 0] -= inv_m[a] * lam * tx
                vel[a, 1] -= inv_m[a] * lam * ty
                vel[a, 2] -= inv_i[a] * lam * rat
                vel[b, 0] += inv_m[b] * lam * tx
                vel[b, 1] += inv_m[b] * lam * ty
                vel[b, 2] += inv_i[b] * lam * rbt
    for c in range(nc):
        if acc_n[c] > 0.0:
            contacts[cidx[c, 0], cidx[c, 1]] = True
            contacts[cidx[c, 1], cidx[c, 0]] = True
    return nc


@njit(cache=True, nogil=True)
def project_positions(pose, inv_m, kind, nv, verts, rad, bound, iters, slop, contacts, wa, wb):
    """Translation-only positional projection down to ``slop`` penetration.

    Pairs found deeper than ``slop`` are flagged in ``contacts``.
    """
    nb = pose.shape[0]
    for _ in range(iters):
        worst = 0.0
        for a in range(nb):
            for b in range(a + 1, nb):
                dx = pose[b, 0] - pose[a, 0]
                dy = pose[b, 1] - pose[a, 1]
                if sqrt(dx * dx + dy * dy) > bound[a] + bound[b] + 1e-6:
                    continue
                d, nx, ny, px, py = pair_contact(
                    pose[a], kind[a], nv[a], verts[a], rad[a], pose[b], kind[b], nv[b], verts[b], rad[b], wa, wb
                )
                if d > slop:
                    contacts[a, b] = True
                    contacts[b, a] = True
                if d > worst:
                    worst = d
                corr = d - slop
                w = inv_m[a] + inv_m[b]
                if corr > 0.0 and w > 0.0:
                    sa = corr * inv_m[a] / w
                    sb = corr * inv_m[b] / w
                    pose[a, 0] -= nx * sa
                    pose[a, 1] -= ny * sa
                    pose[b, 0] += nx * sb
                    pose[b, 1] += ny * sb
        if worst <= slop:
            break


@njit(cache=True, nogil=True)
def _wrap(a):
    if -pi < a <= pi:
        return a
    a = (a + pi) % (2.0 * pi) - pi
    if a == -pi:
        a = pi
    return a


@njit(cache=True, nogil=True)
def step_env(
    robot_pose, robot_vel, wheels, obj_pose, obj_vel, target,
    kind, nv, verts, rad, inv_m, inv_i, fric_r, params, contacts,
):
    """Advance one environment by ``decimation`` substeps in place."""
    n_obj = obj_pose.shape[0]
    nb = n_obj + 1
    dt = params[P_DT]
    decim = int(params[P_DECIM])
    track = params[P_TRACK]
    decay = params[P_PD_DECAY]
    mu_g = params[P_MU_GROUND]
    mu_p = params[P_MU_PUSH]
    grav = params[P_GRAVITY]
    vel_iters = int(params[P_VEL_ITERS])
    pos_iters = int(params[P_POS_ITERS])
    slop = params[P_SLOP]

    pose = np.empty((nb, 3))
    vel = np.empty((nb, 3))
    pose[0] = robot_pose
    vel[0] = robot_vel
    for i in range(n_obj):
        pose[i + 1] = obj_pose[i]
        vel[i + 1] = obj_vel[i]
    bound = np.empty(nb)
    for i in range(nb):
        bound[i] = _bound_radius(kind[i], nv[i], verts[i], rad[i])
    wa = np.empty((4, 2))
    wb = np.empty((4, 2))

    for _ in range(decim):
        # wheel tracking then diff-drive kinematics
        for w in range(2):
            wheels[w] = target[w] + (wheels[w] - target[w]) * decay
        v = 0.5 * (wheels[0] + wheels[1])
        om = (wheels[1] - wheels[0]) / track
        c = cos(pose[0, 2])
        s = sin(pose[0, 2])
        vel[0, 0] = v * c
        vel[0, 1] = v * s
        vel[0, 2] = om
        # ground friction decelerates objects toward rest
        dv = mu_g * grav * dt
        for i in range(1, nb):
            sp = sqrt(vel[i, 0] ** 2 + vel[i, 1] ** 2)
            if sp <= dv:
                vel[i, 0] = 0.0
                vel[i, 1] = 0.0
            else:
                f = (sp - dv) / sp
                vel[i, 0] *= f
                vel[i, 1] *= f
            dw = dv / fric_r[i]
            if abs(vel[i, 2]) <= dw:
                vel[i, 2] = 0.0
            elif vel[i, 2] > 0.0:
                vel[i, 2] -= dw
            else:
                vel[i, 2] += dw
        solve_velocities(pose, vel, inv_m, inv_i, kind, nv, verts, rad, bound, mu_p, vel_iters, contacts, wa, wb)
        # wheels cannot slip sideways
        fwd = vel[0, 0] * c + vel[0, 1] * s
        vel[0, 0] = fwd * c
        vel[0, 1] = fwd * s
        wheels[0] = fwd - vel[0, 2] * track / 2.0
        wheels[1] = fwd + vel[0, 2] * track / 2.0
        for i in range(nb):
            pose[i, 0] += vel[i, 0] * dt
            pose[i, 1] += vel[i, 1] * dt
            pose[i, 2] = _wrap(pose[i, 2] + vel[i, 2] * dt)
        project_positions(pose, inv_m, kind, nv, verts, rad, bound, pos_iters, slop, contacts, wa, wb)

    robot_pose[:] = pose[0]
    robot_vel[:] = vel[0]
    for i in range(n_obj):
        obj_pose[i] = pose[i + 1]
        obj_vel[i] = vel[i + 1]


@njit(cache=True, nogil=True)
def step_batch(
    robot_pose, robot_vel, wheels, obj_pose, obj_vel, targets,
    kind, nv, verts, rad, inv_m, inv_i, fric_r, params, contacts, lo, hi,
):
    for e in range(lo, hi):
        step_env(
            robot_pose[e], robot_vel[e], wheels[e], obj_pose[e], obj_vel[e], targets[e],
            kind, nv, verts, rad, inv_m, inv_i, fric_r, params, contacts[e],
        )


@njit(cache=True, nogil=True)
def overlap_matrix(pose, kind, nv, verts, rad, out_depth):
    """Pairwise contact depth (positive = overlap) for one environment."""
    nb = pose.shape[0]
    wa = np.empty((4, 2))
    wb = np.empty((4, 2))
    for a in range(nb):
        out_depth[a, a] = 0.0
        for b in range(a + 1, nb):
            d, nx, ny, px, py = pair_contact(
                pose[a], kind[a], nv[a], verts[a], rad[a], pose[b], kind[b], nv[b], verts[b], rad[b], wa, wb
            )
            out_depth[a, b] = d
            out_depth[b, a] = d


@njit(cache=True, nogil=True)
def contact_query(pa, ka, nva, va, ra, pb, kb, nvb, vb, rb):
    wa = np.empty((4, 2))
    wb = np.empty((4, 2))
    return pair_contact(pa, ka, nva, va, ra, pb, kb, nvb, vb, rb, wa, wb)


@njit(cache=True, nogil=True)
def kinetic_energy(vel, inv_m, inv_i):
    e = 0.0
    for i in range(vel.shape[0]):
        if inv_m[i] > 0.0:
            e += 0.5 * (vel[i, 0] ** 2 + vel[i, 1] ** 2) / inv_m[i]
        if inv_i[i] > 0.0:
            e += 0.5 * vel[i, 2] ** 2 / inv_i[i]
    return e

