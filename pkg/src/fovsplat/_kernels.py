"""Serial numba kernels for the hot loops: delta-tracking path tracing,
ray marching, splat compositing (forward + backward), grid warping, and the
guided spatial filter.

All kernels are deterministic: no threading, no shared-state RNG. Random
streams are counter-based (splitmix64), derived from (seed, frame, pixel,
sample), so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import numpy as np
from numba import njit

U64_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0  # 2^-53


@njit(cache=True, nogil=True, inline="always")
def _splitmix(state):
    state = state + _GOLDEN
    z = state
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    z = z ^ (z >> np.uint64(31))
    return state, z


@njit(cache=True, nogil=True, inline="always")
def _mix(a, b):
    # one splitmix round keyed by b; order-sensitive on purpose
    s, z = _splitmix(a ^ (b * _GOLDEN))
    return z


@njit(cache=True, nogil=True, inline="always")
def _uniform(state):
    state, z = _splitmix(state)
    return state, float(z >> np.uint64(11)) * _INV53


@njit(cache=True, nogil=True, inline="always")
def _trilinear(data, sx, sy, sz, px, py, pz, nx, ny, nz, size_x, size_y, size_z):
    """Density at a local-space point; 0 outside the volume box."""
    if px < 0.0 or py < 0.0 or pz < 0.0 or px > size_x or py > size_y or pz > size_z:
        return 0.0
    gx = px / sx - 0.5
    gy = py / sy - 0.5
    gz = pz / sz - 0.5
    if gx < 0.0:
        gx = 0.0
    if gy < 0.0:
        gy = 0.0
    if gz < 0.0:
        gz = 0.0
    mx = nx - 1.0
    my = ny - 1.0
    mz = nz - 1.0
    if gx > mx:
        gx = mx
    if gy > my:
        gy = my
    if gz > mz:
        gz = mz
    x0 = int(gx)
    y0 = int(gy)
    z0 = int(gz)
    if x0 > nx - 2 and nx > 1:
        x0 = nx - 2
    if y0 > ny - 2 and ny > 1:
        y0 = ny - 2
    if z0 > nz - 2 and nz > 1:
        z0 = nz - 2
    fx = gx - x0
    fy = gy - y0
    fz = gz - z0
    x1 = x0 + 1 if x0 + 1 < nx else nx - 1
    y1 = y0 + 1 if y0 + 1 < ny else ny - 1
    z1 = z0 + 1 if z0 + 1 < nz else nz - 1
    c00 = data[z0, y0, x0] * (1 - fx) + data[z0, y0, x1] * fx
    c10 = data[z0, y1, x0] * (1 - fx) + data[z0, y1, x1] * fx
    c01 = data[z1, y0, x0] * (1 - fx) + data[z1, y0, x1] * fx
    c11 = data[z1, y1, x0] * (1 - fx) + data[z1, y1, x1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


@njit(cache=True, nogil=True, inline="always")
def _ray_box(ox, oy, oz, dx, dy, dz, size_x, size_y, size_z):
    """Slab intersection with [0,size]; returns (hit, t_enter, t_exit)."""
    t0 = -1e30
    t1 = 1e30
    if abs(dx) < 1e-12:
        if ox < 0.0 or ox > size_x:
            return False, 0.0, 0.0
    else:
        ta = (0.0 - ox) / dx
        tb = (size_x - ox) / dx
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    if abs(dy) < 1e-12:
        if oy < 0.0 or oy > size_y:
            return False, 0.0, 0.0
    else:
        ta = (0.0 - oy) / dy
        tb = (size_y - oy) / dy
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    if abs(dz) < 1e-12:
        if oz < 0.0 or oz > size_z:
            return False, 0.0, 0.0
    else:
        ta = (0.0 - oz) / dz
        tb = (size_z - oz) / dz
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    if t1 < t0 or t1 < 0.0:
        return False, 0.0, 0.0
    return True, t0, t1


@njit(cache=True, nogil=True, inline="always")
def _lut_alpha(alpha_lut, x):
    n = alpha_lut.shape[0]
    g = x * (n - 1)
    i = int(g)
    if i > n - 2:
        i = n - 2
    f = g - i
    return alpha_lut[i] * (1 - f) + alpha_lut[i + 1] * f


@njit(cache=True, nogil=True, inline="always")
def _lut_rgb(rgb_lut, x):
    n = rgb_lut.shape[0]
    g = x * (n - 1)
    i = int(g)
    if i > n - 2:
        i = n - 2
    f = g - i
    r = rgb_lut[i, 0] * (1 - f) + rgb_lut[i + 1, 0] * f
    g2 = rgb_lut[i, 1] * (1 - f) + rgb_lut[i + 1, 1] * f
    b = rgb_lut[i, 2] * (1 - f) + rgb_lut[i + 1, 2] * f
    return r, g2, b


@njit(cache=True, nogil=True, inline="always")
def _env_lookup(env, dx, dy, dz):
    h = env.shape[0]
    w = env.shape[1]
    cy = dy
    if cy > 1.0:
        cy = 1.0
    if cy < -1.0:
        cy = -1.0
    theta = np.arccos(cy)
    phi = np.arctan2(dx, -dz)
    u = phi / (2.0 * np.pi) + 0.5
    v = theta / np.pi
    x = u * w - 0.5
    y = v * h - 0.5
    if y < 0.0:
        y = 0.0
    if y > h - 1.0:
        y = h - 1.0
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    fx = x - x0
    fy = y - y0
    x0m = x0 % w
    x1m = (x0 + 1) % w
    y1 = y0 + 1 if y0 + 1 < h else h - 1
    r = (
        env[y0, x0m, 0] * (1 - fx) * (1 - fy)
        + env[y0, x1m, 0] * fx * (1 - fy)
        + env[y1, x0m, 0] * (1 - fx) * fy
        + env[y1, x1m, 0] * fx * fy
    )
    g = (
        env[y0, x0m, 1] * (1 - fx) * (1 - fy)
        + env[y0, x1m, 1] * fx * (1 - fy)
        + env[y1, x0m, 1] * (1 - fx) * fy
        + env[y1, x1m, 1] * fx * fy
    )
    b = (
        env[y0, x0m, 2] * (1 - fx) * (1 - fy)
        + env[y0, x1m, 2] * fx * (1 - fy)
        + env[y1, x0m, 2] * (1 - fx) * fy
        + env[y1, x1m, 2] * fx * fy
    )
    return r, g, b


@njit(cache=True, nogil=True, inline="always")
def _isotropic_dir(state):
    state, u1 = _uniform(state)
    state, u2 = _uniform(state)
    z = 1.0 - 2.0 * u1
    r = np.sqrt(max(0.0, 1.0 - z * z))
    phi = 2.0 * np.pi * u2
    return state, r * np.cos(phi), r * np.sin(phi), z


@njit(cache=True, nogil=True)
def render_paths(
    data,
    spacing,
    size,
    alpha_lut,
    rgb_lut,
    sigma_scale,
    sigma_maj,
    env,
    rot_l2w,
    origin,
    dirs,
    spp,
    max_bounces,
    seed,
    frame_id,
):
    """Delta-tracking path tracer over a list of primary rays (local space).

    Returns (fg, bg_count): ``fg`` is the mean premultiplied scattered
    radiance per ray, ``bg_count`` the number of samples that escaped without
    any interaction (their contribution is the environment along the primary
    ray and is composited by the caller).
    """
    n = dirs.shape[0]
    nx = data.shape[2]
    ny = data.shape[1]
    nz = data.shape[0]
    sx, sy, sz = spacing[0], spacing[1], spacing[2]
    size_x, size_y, size_z = size[0], size[1], size[2]
    fg = np.zeros((n, 3), dtype=np.float64)
    bg_count = np.zeros(n, dtype=np.int64)
    base = _mix(np.uint64(seed), np.uint64(frame_id))
    for i in range(n):
        pix_key = _mix(base, np.uint64(i))
        for s in range(spp):
            state = _mix(pix_key, np.uint64(s))
            ox, oy, oz = origin[0], origin[1], origin[2]
            dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
            wr = 1.0
            wg = 1.0
            wb = 1.0
            bounces = 0
            while True:
                hit, t0, t1 = _ray_box(ox, oy, oz, dx, dy, dz, size_x, size_y, size_z)
                if not hit or sigma_maj <= 0.0:
                    # escaped the medium entirely
                    if bounces > 0:
                        wx = rot_l2w[0, 0] * dx + rot_l2w[0, 1] * dy + rot_l2w[0, 2] * dz
                        wy = rot_l2w[1, 0] * dx + rot_l2w[1, 1] * dy + rot_l2w[1, 2] * dz
                        wz = rot_l2w[2, 0] * dx + rot_l2w[2, 1] * dy + rot_l2w[2, 2] * dz
                        er, eg, eb = _env_lookup(env, wx, wy, wz)
                        fg[i, 0] += wr * er
                        fg[i, 1] += wg * eg
                        fg[i, 2] += wb * eb
                    else:
                        bg_count[i] += 1
                    break
                t = t0 if t0 > 0.0 else 0.0
                collided = False
                dens = 0.0
                while True:
                    state, u = _uniform(state)
                    t -= np.log(1.0 - u) / sigma_maj
                    if t >= t1:
                        break
                    px = ox + t * dx
                    py = oy + t * dy
                    pz = oz + t * dz
                    dens = _trilinear(data, sx, sy, sz, px, py, pz, nx, ny, nz, size_x, size_y, size_z)
                    a = _lut_alpha(alpha_lut, dens) * sigma_scale
                    state, u2 = _uniform(state)
                    if u2 * sigma_maj < a:
                        collided = True
                        break
                if not collided:
                    if bounces > 0:
                        wx = rot_l2w[0, 0] * dx + rot_l2w[0, 1] * dy + rot_l2w[0, 2] * dz
                        wy = rot_l2w[1, 0] * dx + rot_l2w[1, 1] * dy + rot_l2w[1, 2] * dz
                        wz = rot_l2w[2, 0] * dx + rot_l2w[2, 1] * dy + rot_l2w[2, 2] * dz
                        er, eg, eb = _env_lookup(env, wx, wy, wz)
                        fg[i, 0] += wr * er
                        fg[i, 1] += wg * eg
                        fg[i, 2] += wb * eb
                    else:
                        bg_count[i] += 1
                    break
                bounces += 1
                if bounces > max_bounces:
                    break  # truncated path contributes nothing
                cr, cg, cb = _lut_rgb(rgb_lut, dens)
                wr *= cr
                wg *= cg
                wb *= cb
                if wr < 1e-7 and wg < 1e-7 and wb < 1e-7:
                    break
                ox = ox + t * dx
                oy = oy + t * dy
                oz = oz + t * dz
                state, dx, dy, dz = _isotropic_dir(state)
        fg[i, 0] /= spp
        fg[i, 1] /= spp
        fg[i, 2] /= spp
    return fg, bg_count


@njit(cache=True, nogil=True)
def first_hits(data, spacing, size, alpha_lut, origins, dirs, threshold, step):
    """Fixed-step march; distance of the first sample with alpha >= threshold.

    Returns -1.0 for rays with no significant hit.
    """
    n = dirs.shape[0]
    nx = data.shape[2]
    ny = data.shape[1]
    nz = data.shape[0]
    sx, sy, sz = spacing[0], spacing[1], spacing[2]
    size_x, size_y, size_z = size[0], size[1], size[2]
    out = np.full(n, -1.0, dtype=np.float64)
    for i in range(n):
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        hit, t0, t1 = _ray_box(ox, oy, oz, dx, dy, dz, size_x, size_y, size_z)
        if not hit:
            continue
        t = t0 if t0 > 0.0 else 0.0
        t += 0.5 * step
        while t < t1:
            px = ox + t * dx
            py = oy + t * dy
            pz = oz + t * dz
            dens = _trilinear(data, sx, sy, sz, px, py, pz, nx, ny, nz, size_x, size_y, size_z)
            if _lut_alpha(alpha_lut, dens) >= threshold:
                out[i] = t
                break
            t += step
    return out


@njit(cache=True, nogil=True)
def albedo_march(data, spacing, size, alpha_lut, rgb_lut, positions, dirs, steps, step):
    """Front-to-back composite of the transfer function from each hit point."""
    n = positions.shape[0]
    nx = data.shape[2]
    ny = data.shape[1]
    nz = data.shape[0]
    sx, sy, sz = spacing[0], spacing[1], spacing[2]
    size_x, size_y, size_z = size[0], size[1], size[2]
    out = np.zeros((n, 3), dtype=np.float64)
    for i in range(n):
        px, py, pz = positions[i, 0], positions[i, 1], positions[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        if steps == 0:
            dens = _trilinear(data, sx, sy, sz, px, py, pz, nx, ny, nz, size_x, size_y, size_z)
            r, g, b = _lut_rgb(rgb_lut, dens)
            out[i, 0] = r
            out[i, 1] = g
            out[i, 2] = b
            continue
        acc_r = 0.0
        acc_g = 0.0
        acc_b = 0.0
        acc_a = 0.0
        for k in range(steps):
            qx = px + k * step * dx
            qy = py + k * step * dy
            qz = pz + k * step * dz
            dens = _trilinear(data, sx, sy, sz, qx, qy, qz, nx, ny, nz, size_x, size_y, size_z)
            a = _lut_alpha(alpha_lut, dens)
            r, g, b = _lut_rgb(rgb_lut, dens)
            acc_r += (1.0 - acc_a) * a * r
            acc_g += (1.0 - acc_a) * a * g
            acc_b += (1.0 - acc_a) * a * b
            acc_a += (1.0 - acc_a) * a
            if acc_a > 0.999:
                break
        out[i, 0] = acc_r
        out[i, 1] = acc_g
        out[i, 2] = acc_b
    return out


@njit(cache=True, nogil=True)
def shade_points(
    data,
    spacing,
    size,
    alpha_lut,
    rgb_lut,
    sigma_scale,
    sigma_maj,
    env,
    rot_l2w,
    positions,
    samples,
    max_bounces,
    seed,
):
    """Average path-traced shading at fixed scattering points (local space)."""
    n = positions.shape[0]
    nx = data.shape[2]
    ny = data.shape[1]
    nz = data.shape[0]
    sx, sy, sz = spacing[0], spacing[1], spacing[2]
    size_x, size_y, size_z = size[0], size[1], size[2]
    out = np.zeros((n, 3), dtype=np.float64)
    base = _mix(np.uint64(seed), np.uint64(0x51A7))
    for i in range(n):
        pt_key = _mix(base, np.uint64(i))
        dens0 = _trilinear(
            data, sx, sy, sz, positions[i, 0], positions[i, 1], positions[i, 2], nx, ny, nz, size_x, size_y, size_z
        )
        a0r, a0g, a0b = _lut_rgb(rgb_lut, dens0)
        for s in range(samples):
            state = _mix(pt_key, np.uint64(s))
            wr, wg, wb = a0r, a0g, a0b
            ox, oy, oz = positions[i, 0], positions[i, 1], positions[i, 2]
            state, dx, dy, dz = _isotropic_dir(state)
            bounces = 1
            while True:
                hit, t0, t1 = _ray_box(ox, oy, oz, dx, dy, dz, size_x, size_y, size_z)
                if not hit or sigma_maj <= 0.0:
                    wx = rot_l2w[0, 0] * dx + rot_l2w[0, 1] * dy + rot_l2w[0, 2] * dz
                    wy = rot_l2w[1, 0] * dx + rot_l2w[1, 1] * dy + rot_l2w[1, 2] * dz
                    wz = rot_l2w[2, 0] * dx + rot_l2w[2, 1] * dy + rot_l2w[2, 2] * dz
                    er, eg, eb = _env_lookup(env, wx, wy, wz)
                    out[i, 0] += wr * er
                    out[i, 1] += wg * eg
                    out[i, 2] += wb * eb
                    break
                t = t0 if t0 > 0.0 else 0.0
                collided = False
                dens = 0.0
                while True:
                    state, u = _uniform(state)
                    t -= np.log(1.0 - u) / sigma_maj
                    if t >= t1:
                        break
                    px = ox + t * dx
                    py = oy + t * dy
                    pz = oz + t * dz
                    dens = _trilinear(data, sx, sy, sz, px, py, pz, nx, ny, nz, size_x, size_y, size_z)
                    a = _lut_alpha(alpha_lut, dens) * sigma_scale
                    state, u2 = _uniform(state)
                    if u2 * sigma_maj < a:
                        collided = True
                        break
                if not collided:
                    wx = rot_l2w[0, 0] * dx + rot_l2w[0, 1] * dy + rot_l2w[0, 2] * dz
                    wy = rot_l2w[1, 0] * dx + rot_l2w[1, 1] * dy + rot_l2w[1, 2] * dz
                    wz = rot_l2w[2, 0] * dx + rot_l2w[2, 1] * dy + rot_l2w[2, 2] * dz
                    er, eg, eb = _env_lookup(env, wx, wy, wz)
                    out[i, 0] += wr * er
                    out[i, 1] += wg * eg
                    out[i, 2] += wb * eb
                    break
                bounces += 1
                if bounces > max_bounces:
                    break
                cr, cg, cb = _lut_rgb(rgb_lut, dens)
                wr *= cr
                wg *= cg
                wb *= cb
                if wr < 1e-7 and wg < 1e-7 and wb < 1e-7:
                    break
                ox = ox + t * dx
                oy = oy + t * dy
                oz = oz + t * dz
                state, dx, dy, dz = _isotropic_dir(state)
        out[i, 0] /= samples
        out[i, 1] /= samples
        out[i, 2] /= samples
    return out


ALPHA_CLAMP = 0.999
WEIGHT_FLOOR = 1.0 / 255.0
T_STOP = 1e-4


@njit(cache=True, nogil=True)
def raster_forward(means2d, conics, alphas, colors, bboxes, order, width, height, background):
    """Front-to-back splat compositing over per-Gaussian bounding boxes.

    ``order`` must be sorted near-to-far (stable by Gaussian index on equal
    depth). Returns (rgb, alpha, max_weight, final_T).
    """
    rgb = np.zeros((height, width, 3), dtype=np.float64)
    alpha_img = np.zeros((height, width), dtype=np.float64)
    trans = np.ones((height, width), dtype=np.float64)
    max_w = np.zeros(means2d.shape[0], dtype=np.float64)
    for oi in range(order.shape[0]):
        g = order[oi]
        x0 = bboxes[g, 0]
        x1 = bboxes[g, 1]
        y0 = bboxes[g, 2]
        y1 = bboxes[g, 3]
        if x0 >= x1 or y0 >= y1:
            continue
        mx = means2d[g, 0]
        my = means2d[g, 1]
        ca = conics[g, 0]
        cb = conics[g, 1]
        cc = conics[g, 2]
        op = alphas[g]
        for yy in range(y0, y1):
            py = yy + 0.5
            for xx in range(x0, x1):
                t = trans[yy, xx]
                if t < T_STOP:
                    continue
                px = xx + 0.5
                dx = px - mx
                dy = py - my
                power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                if power > 0.0:
                    continue
                a = op * np.exp(power)
                if a < WEIGHT_FLOOR:
                    continue
                if a > ALPHA_CLAMP:
                    a = ALPHA_CLAMP
                w = a * t
                if w > max_w[g]:
                    max_w[g] = w
                rgb[yy, xx, 0] += w * colors[g, 0]
                rgb[yy, xx, 1] += w * colors[g, 1]
                rgb[yy, xx, 2] += w * colors[g, 2]
                trans[yy, xx] = t * (1.0 - a)
    for yy in range(height):
        for xx in range(width):
            t = trans[yy, xx]
            alpha_img[yy, xx] = 1.0 - t
            rgb[yy, xx, 0] += t * background[0]
            rgb[yy, xx, 1] += t * background[1]
            rgb[yy, xx, 2] += t * background[2]
    return rgb, alpha_img, max_w, trans


@njit(cache=True, nogil=True)
def raster_backward(
    means2d,
    conics,
    alphas,
    colors,
    bboxes,
    order,
    width,
    height,
    background,
    fg_total,
    final_t,
    d_rgb,
    d_alpha,
):
    """Gradients of the composite wrt per-Gaussian 2D parameters.

    Re-traverses Gaussians in the forward order, reproducing the forward
    skip/clamp decisions exactly, and uses suffix sums of the composite for
    the transmittance chain.
    """
    n = means2d.shape[0]
    d_mean2d = np.zeros((n, 2), dtype=np.float64)
    d_conic = np.zeros((n, 3), dtype=np.float64)
    d_alpha_act = np.zeros(n, dtype=np.float64)
    d_color = np.zeros((n, 3), dtype=np.float64)
    trans = np.ones((height, width), dtype=np.float64)
    # prefix of composited premultiplied color per pixel
    pref = np.zeros((height, width, 3), dtype=np.float64)
    for oi in range(order.shape[0]):
        g = order[oi]
        x0 = bboxes[g, 0]
        x1 = bboxes[g, 1]
        y0 = bboxes[g, 2]
        y1 = bboxes[g, 3]
        if x0 >= x1 or y0 >= y1:
            continue
        mx = means2d[g, 0]
        my = means2d[g, 1]
        ca = conics[g, 0]
        cb = conics[g, 1]
        cc = conics[g, 2]
        op = alphas[g]
        cr = colors[g, 0]
        cg = colors[g, 1]
        cbl = colors[g, 2]
        for yy in range(y0, y1):
            py = yy + 0.5
            for xx in range(x0, x1):
                t = trans[yy, xx]
                if t < T_STOP:
                    continue
                px = xx + 0.5
                dx = px - mx
                dy = py - my
                power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                if power > 0.0:
                    continue
                gval = np.exp(power)
                a = op * gval
                if a < WEIGHT_FLOOR:
                    continue
                clamped = a > ALPHA_CLAMP
                if clamped:
                    a = ALPHA_CLAMP
                w = a * t
                gr = d_rgb[yy, xx, 0]
                gg = d_rgb[yy, xx, 1]
                gb = d_rgb[yy, xx, 2]
                # color gradient
                d_color[g, 0] += w * gr
                d_color[g, 1] += w * gg
                d_color[g, 2] += w * gb
                # suffix radiance after this Gaussian (incl. background term)
                tf = final_t[yy, xx]
                sr = fg_total[yy, xx, 0] - pref[yy, xx, 0] - w * cr + tf * background[0]
                sg = fg_total[yy, xx, 1] - pref[yy, xx, 1] - w * cg + tf * background[1]
                sb = fg_total[yy, xx, 2] - pref[yy, xx, 2] - w * cbl + tf * background[2]
                inv = 1.0 / (1.0 - a)
                dca_r = t * cr - sr * inv
                dca_g = t * cg - sg * inv
                dca_b = t * cbl - sb * inv
                d_a = gr * dca_r + gg * dca_g + gb * dca_b
                d_a += d_alpha[yy, xx] * tf * inv
                if not clamped:
                    d_alpha_act[g] += d_a * gval
                    dg = d_a * op
                    # dG/dpower = G; dpower/d(mean,conic)
                    dpow = dg * gval
                    d_mean2d[g, 0] += dpow * (ca * dx + cb * dy)
                    d_mean2d[g, 1] += dpow * (cb * dx + cc * dy)
                    d_conic[g, 0] += dpow * (-0.5 * dx * dx)
                    d_conic[g, 1] += dpow * (-dx * dy)
                    d_conic[g, 2] += dpow * (-0.5 * dy * dy)
                pref[yy, xx, 0] += w * cr
                pref[yy, xx, 1] += w * cg
                pref[yy, xx, 2] += w * cbl
                trans[yy, xx] = t * (1.0 - a)
    return d_mean2d, d_conic, d_alpha_act, d_color


@njit(cache=True, nogil=True)
def warp_grid(
    verts_px,
    verts_z,
    verts_src_depth,
    verts_valid,
    verts_uv,
    src_rgba,
    out_w,
    out_h,
    ratio_max,
):
    """Rasterize a depth-deformed quad grid with perspective-correct texturing.

    ``verts_px`` holds display pixel coordinates, ``verts_z`` view-space
    depths in the display camera, ``verts_src_depth`` the source depth used
    for the disocclusion edge test, ``verts_uv`` source texture coordinates
    in [0,1]. Triangles touching an invalid vertex or stretched beyond
    ``ratio_max`` in source depth are dropped. Returns (rgba, zbuf,
    dropped_triangles).
    """
    gy = verts_px.shape[0]
    gx = verts_px.shape[1]
    hs = src_rgba.shape[0]
    ws = src_rgba.shape[1]
    nc = src_rgba.shape[2]
    out = np.zeros((out_h, out_w, nc), dtype=np.float64)
    zbuf = np.full((out_h, out_w), 1e30, dtype=np.float64)
    dropped = 0
    for j in range(gy - 1):
        for i in range(gx - 1):
            for half in range(2):
                if half == 0:
                    r0, c0 = j, i
                    r1, c1 = j, i + 1
                    r2, c2 = j + 1, i
                else:
                    r0, c0 = j + 1, i + 1
                    r1, c1 = j + 1, i
                    r2, c2 = j, i + 1
                if verts_valid[r0, c0] == 0 or verts_valid[r1, c1] == 0 or verts_valid[r2, c2] == 0:
                    continue
                sd0 = verts_src_depth[r0, c0]
                sd1 = verts_src_depth[r1, c1]
                sd2 = verts_src_depth[r2, c2]
                dmin = min(sd0, min(sd1, sd2))
                dmax = max(sd0, max(sd1, sd2))
                if dmin <= 0.0 or dmax / dmin > ratio_max:
                    dropped += 1
                    continue
                x0 = verts_px[r0, c0, 0]
                y0 = verts_px[r0, c0, 1]
                x1 = verts_px[r1, c1, 0]
                y1 = verts_px[r1, c1, 1]
                x2 = verts_px[r2, c2, 0]
                y2 = verts_px[r2, c2, 1]
                area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
                if abs(area) < 1e-12:
                    continue
                z0 = verts_z[r0, c0]
                z1 = verts_z[r1, c1]
                z2 = verts_z[r2, c2]
                if z0 <= 0.0 or z1 <= 0.0 or z2 <= 0.0:
                    continue
                u0 = verts_uv[r0, c0, 0]
                v0 = verts_uv[r0, c0, 1]
                u1 = verts_uv[r1, c1, 0]
                v1 = verts_uv[r1, c1, 1]
                u2 = verts_uv[r2, c2, 0]
                v2 = verts_uv[r2, c2, 1]
                xmin = int(np.floor(min(x0, min(x1, x2))))
                xmax = int(np.ceil(max(x0, max(x1, x2))))
                ymin = int(np.floor(min(y0, min(y1, y2))))
                ymax = int(np.ceil(max(y0, max(y1, y2))))
                if xmin < 0:
                    xmin = 0
                if ymin < 0:
                    ymin = 0
                if xmax > out_w:
                    xmax = out_w
                if ymax > out_h:
                    ymax = out_h
                inv_area = 1.0 / area
                for yy in range(ymin, ymax):
                    pyc = yy + 0.5
                    for xx in range(xmin, xmax):
                        pxc = xx + 0.5
                        w0 = ((x1 - pxc) * (y2 - pyc) - (x2 - pxc) * (y1 - pyc)) * inv_area
                        w1 = ((x2 - pxc) * (y0 - pyc) - (x0 - pxc) * (y2 - pyc)) * inv_area
                        w2 = 1.0 - w0 - w1
                        if w0 < -1e-9 or w1 < -1e-9 or w2 < -1e-9:
                            continue
                        inv_z = w0 / z0 + w1 / z1 + w2 / z2
                        if inv_z <= 0.0:
                            continue
                        z = 1.0 / inv_z
                        if z >= zbuf[yy, xx]:
                            continue
                        uu = (w0 * u0 / z0 + w1 * u1 / z1 + w2 * u2 / z2) * z
                        vv = (w0 * v0 / z0 + w1 * v1 / z1 + w2 * v2 / z2) * z
                        # bilinear sample of the source image (v up, rows top-down)
                        sxf = uu * ws - 0.5
                        syf = (1.0 - vv) * hs - 0.5
                        if sxf < 0.0:
                            sxf = 0.0
                        if syf < 0.0:
                            syf = 0.0
                        if sxf > ws - 1.0:
                            sxf = ws - 1.0
                        if syf > hs - 1.0:
                            syf = hs - 1.0
                        ix = int(sxf)
                        iy = int(syf)
                        if ix > ws - 2 and ws > 1:
                            ix = ws - 2
                        if iy > hs - 2 and hs > 1:
                            iy = hs - 2
                        fx = sxf - ix
                        fy = syf - iy
                        ix1 = ix + 1 if ix + 1 < ws else ws - 1
                        iy1 = iy + 1 if iy + 1 < hs else hs - 1
                        for c in range(nc):
                            val = (
                                src_rgba[iy, ix, c] * (1 - fx) * (1 - fy)
                                + src_rgba[iy, ix1, c] * fx * (1 - fy)
                                + src_rgba[iy1, ix, c] * (1 - fx) * fy
                                + src_rgba[iy1, ix1, c] * fx * fy
                            )
                            out[yy, xx, c] = val
                        zbuf[yy, xx] = z
    return out, zbuf, dropped


@njit(cache=True, nogil=True)
def guided_filter(rgb, albedo, depth, radius, sigma_px, sigma_albedo, sigma_depth):
    """Joint-bilateral filter guided by albedo and relative depth."""
    h = rgb.shape[0]
    w = rgb.shape[1]
    out = np.zeros_like(rgb)
    inv2_px = 1.0 / (2.0 * sigma_px * sigma_px)
    inv2_alb = 1.0 / (2.0 * sigma_albedo * sigma_albedo)
    inv2_dep = 1.0 / (2.0 * sigma_depth * sigma_depth)
    for y in range(h):
        for x in range(w):
            a0r = albedo[y, x, 0]
            a0g = albedo[y, x, 1]
            a0b = albedo[y, x, 2]
            d0 = depth[y, x]
            acc_r = 0.0
            acc_g = 0.0
            acc_b = 0.0
            acc_w = 0.0
            for oy in range(-radius, radius + 1):
                yy = y + oy
                if yy < 0 or yy >= h:
                    continue
                for ox in range(-radius, radius + 1):
                    xx = x + ox
                    if xx < 0 or xx >= w:
                        continue
                    da = (
                        (albedo[yy, xx, 0] - a0r) ** 2
                        + (albedo[yy, xx, 1] - a0g) ** 2
                        + (albedo[yy, xx, 2] - a0b) ** 2
                    )
                    d1 = depth[yy, xx]
                    if d0 > 0.0 and d1 > 0.0:
                        dd = (d1 - d0) / d0
                        wdep = np.exp(-dd * dd * inv2_dep)
                    elif d0 == d1:
                        wdep = 1.0
                    else:
                        wdep = 0.0
                    wgt = np.exp(-(ox * ox + oy * oy) * inv2_px) * np.exp(-da * inv2_alb) * wdep
                    acc_r += wgt * rgb[yy, xx, 0]
                    acc_g += wgt * rgb[yy, xx, 1]
                    acc_b += wgt * rgb[yy, xx, 2]
                    acc_w += wgt
            if acc_w > 0.0:
                out[y, x, 0] = acc_r / acc_w
                out[y, x, 1] = acc_g / acc_w
                out[y, x, 2] = acc_b / acc_w
            else:
                out[y, x, 0] = rgb[y, x, 0]
                out[y, x, 1] = rgb[y, x, 1]
                out[y, x, 2] = rgb[y, x, 2]
    return out
