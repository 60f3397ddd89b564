"""Numba per-pixel compositing kernels.

Splat arrays handed to these kernels are already in global depth order.
All arithmetic is scalar float64 in a fixed order so that tiled and untiled
traversals of the same splat sequence produce bit-identical pixels.
"""

import math

import numpy as np
from numba import njit

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4


@njit(cache=True)
def bin_splats(means2d, radii, width, height, tile):
    """Per-tile splat lists.  Returns (offsets, flat) with tile t owning flat[offsets[t]:offsets[t+1]]."""
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n = means2d.shape[0]
    rects = np.full((n, 4), -1, np.int64)
    counts = np.zeros(tiles_x * tiles_y, np.int64)
    for i in range(n):
        r = radii[i]
        if not r > 0.0:
            continue
        mx = means2d[i, 0]
        my = means2d[i, 1]
        fx0 = max(mx - r, -1.0)
        fx1 = min(mx + r, float(width))
        fy0 = max(my - r, -1.0)
        fy1 = min(my + r, float(height))
        x0 = max(0, int(math.ceil(fx0)))
        x1 = min(width - 1, int(math.floor(fx1)))
        y0 = max(0, int(math.ceil(fy0)))
        y1 = min(height - 1, int(math.floor(fy1)))
        if x0 > x1 or y0 > y1:
            continue
        tx0 = x0 // tile
        tx1 = x1 // tile
        ty0 = y0 // tile
        ty1 = y1 // tile
        rects[i, 0] = tx0
        rects[i, 1] = tx1
        rects[i, 2] = ty0
        rects[i, 3] = ty1
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * tiles_x + tx] += 1
    offsets = np.zeros(tiles_x * tiles_y + 1, np.int64)
    for t in range(tiles_x * tiles_y):
        offsets[t + 1] = offsets[t] + counts[t]
    flat = np.empty(offsets[-1], np.int64)
    fill = offsets[:-1].copy()
    for i in range(n):
        if rects[i, 0] < 0:
            continue
        for ty in range(rects[i, 2], rects[i, 3] + 1):
            for tx in range(rects[i, 0], rects[i, 1] + 1):
                t = ty * tiles_x + tx
                flat[fill[t]] = i
                fill[t] += 1
    return offsets, flat


@njit(cache=True)
def render_tiles(means2d, conics, opacities, colors, offsets, flat, width, height, tile):
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    rgb = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    overdraw = np.zeros((height, width), np.int64)
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            start = offsets[t]
            stop = offsets[t + 1]
            for py in range(ty * tile, min((ty + 1) * tile, height)):
                for px in range(tx * tile, min((tx + 1) * tile, width)):
                    T = 1.0
                    r = 0.0
                    g = 0.0
                    b = 0.0
                    count = 0
                    for j in range(start, stop):
                        i = flat[j]
                        dx = px - means2d[i, 0]
                        dy = py - means2d[i, 1]
                        power = -0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy) - conics[i, 1] * dx * dy
                        a = min(ALPHA_MAX, opacities[i] * math.exp(power))
                        if a < ALPHA_MIN:
                            continue
                        w = a * T
                        r += colors[i, 0] * w
                        g += colors[i, 1] * w
                        b += colors[i, 2] * w
                        count += 1
                        T = T * (1.0 - a)
                        if T < T_MIN:
                            break
                    rgb[py, px, 0] = r
                    rgb[py, px, 1] = g
                    rgb[py, px, 2] = b
                    alpha[py, px] = 1.0 - T
                    overdraw[py, px] = count
    return rgb, alpha, overdraw


@njit(cache=True)
def render_tiles_backward(means2d, conics, opacities, colors, offsets, flat, width, height, tile, grad_rgb):
    """Vector-Jacobian product of ``render_tiles`` w.r.t. splat inputs.

    The per-pixel contributor list is recomputed; the depth order, the skip
    test and early termination are treated as constants.
    """
    n = means2d.shape[0]
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_color = np.zeros((n, 3))
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            start = offsets[t]
            stop = offsets[t + 1]
            m = stop - start
            ids = np.empty(m, np.int64)
            alphas = np.empty(m)
            trans = np.empty(m)
            gauss = np.empty(m)
            clamped = np.empty(m, np.bool_)
            for py in range(ty * tile, min((ty + 1) * tile, height)):
                for px in range(tx * tile, min((tx + 1) * tile, width)):
                    gr = grad_rgb[py, px, 0]
                    gg = grad_rgb[py, px, 1]
                    gb = grad_rgb[py, px, 2]
                    if gr == 0.0 and gg == 0.0 and gb == 0.0:
                        continue
                    T = 1.0
                    count = 0
                    for j in range(start, stop):
                        i = flat[j]
                        dx = px - means2d[i, 0]
                        dy = py - means2d[i, 1]
                        power = -0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy) - conics[i, 1] * dx * dy
                        gval = math.exp(power)
                        raw = opacities[i] * gval
                        a = min(ALPHA_MAX, raw)
                        if a < ALPHA_MIN:
                            continue
                        ids[count] = i
                        alphas[count] = a
                        trans[count] = T
                        gauss[count] = gval
                        clamped[count] = raw > ALPHA_MAX
                        count += 1
                        T = T * (1.0 - a)
                        if T < T_MIN:
                            break
                    sr = 0.0
                    sg = 0.0
                    sb = 0.0
                    for c in range(count - 1, -1, -1):
                        i = ids[c]
                        a = alphas[c]
                        Ti = trans[c]
                        w = a * Ti
                        g_color[i, 0] += gr * w
                        g_color[i, 1] += gg * w
                        g_color[i, 2] += gb * w
                        d_a = (gr * (colors[i, 0] * Ti - sr / (1.0 - a))
                               + gg * (colors[i, 1] * Ti - sg / (1.0 - a))
                               + gb * (colors[i, 2] * Ti - sb / (1.0 - a)))
                        sr += colors[i, 0] * w
                        sg += colors[i, 1] * w
                        sb += colors[i, 2] * w
                        if clamped[c]:
                            continue
                        g_opac[i] += d_a * gauss[c]
                        d_power = d_a * a
                        dx = px - means2d[i, 0]
                        dy = py - means2d[i, 1]
                        # power = -1/2 (A dx^2 + C dy^2) - B dx dy, with dx = px - mean_x
                        g_mean[i, 0] += d_power * (conics[i, 0] * dx + conics[i, 1] * dy)
                        g_mean[i, 1] += d_power * (conics[i, 2] * dy + conics[i, 1] * dx)
                        g_conic[i, 0] += d_power * (-0.5 * dx * dx)
                        g_conic[i, 1] += d_power * (-dx * dy)
                        g_conic[i, 2] += d_power * (-0.5 * dy * dy)
    return g_mean, g_conic, g_opac, g_color


@njit(cache=True)
def pixel_states(means2d, conics, opacities, offsets, flat, width, height, tile):
    """Per-pixel (composited count, clamped count) used to detect non-smooth points."""
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    states = np.zeros((height, width, 2), np.int64)
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            for py in range(ty * tile, min((ty + 1) * tile, height)):
                for px in range(tx * tile, min((tx + 1) * tile, width)):
                    T = 1.0
                    for j in range(offsets[t], offsets[t + 1]):
                        i = flat[j]
                        dx = px - means2d[i, 0]
                        dy = py - means2d[i, 1]
                        power = -0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy) - conics[i, 1] * dx * dy
                        raw = opacities[i] * math.exp(power)
                        a = min(ALPHA_MAX, raw)
                        if a < ALPHA_MIN:
                            continue
                        states[py, px, 0] += 1
                        if raw > ALPHA_MAX:
                            states[py, px, 1] += 1
                        T = T * (1.0 - a)
                        if T < T_MIN:
                            break
    return states
