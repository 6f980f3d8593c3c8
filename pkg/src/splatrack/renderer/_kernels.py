"""Tile rasterization kernels.

Each tile holds a depth-sorted list of Gaussian indices. Pixels walk their
tile's list front to back; the backward pass re-walks the same list to
rebuild transmittances and then accumulates gradients back to front. Tiles
are processed in a fixed order, so per-Gaussian sums are reproducible.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def rasterize_tiles(height, width, tile, tiles_x, tile_ranges, tile_list,
                    mean2d, conic, opacity, attrs, alpha_min, t_min):
    n_ch = attrs.shape[1]
    out = np.zeros((height, width, n_ch))
    density = np.zeros((height, width))
    final_t = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    visibility = np.zeros(mean2d.shape[0])
    # alpha < alpha_min  <=>  power < log(alpha_min / o); skips most exp calls
    cut = np.log(alpha_min / opacity)

    for tid in range(tile_ranges.shape[0]):
        start = tile_ranges[tid, 0]
        end = tile_ranges[tid, 1]
        if start == end:
            continue
        ty = tid // tiles_x
        tx = tid - ty * tiles_x
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                t = 1.0
                last = start
                for k in range(start, end):
                    g = tile_list[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    last = k + 1
                    if power < cut[g] - 1e-9:
                        continue
                    alpha = opacity[g] * math.exp(power)
                    if alpha < alpha_min:
                        continue
                    w = t * alpha
                    for c in range(n_ch):
                        out[py, px, c] += w * attrs[g, c]
                    density[py, px] += w
                    visibility[g] += w
                    t *= 1.0 - alpha
                    if t < t_min:
                        break
                final_t[py, px] = t
                n_contrib[py, px] = last - start
    return out, density, final_t, n_contrib, visibility


@njit(cache=True)
def rasterize_tiles_backward(height, width, tile, tiles_x, tile_ranges, tile_list,
                             mean2d, conic, opacity, attrs, alpha_min, n_contrib,
                             grad_out, grad_density):
    n = mean2d.shape[0]
    n_ch = attrs.shape[1]
    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opacity = np.zeros(n)
    g_attrs = np.zeros((n, n_ch))

    max_len = 0
    for tid in range(tile_ranges.shape[0]):
        max_len = max(max_len, tile_ranges[tid, 1] - tile_ranges[tid, 0])
    buf_g = np.empty(max_len, dtype=np.int64)
    buf_alpha = np.empty(max_len)
    buf_t = np.empty(max_len)
    buf_gauss = np.empty(max_len)
    accum = np.empty(n_ch)
    cut = np.log(alpha_min / opacity)

    for tid in range(tile_ranges.shape[0]):
        start = tile_ranges[tid, 0]
        end = tile_ranges[tid, 1]
        if start == end:
            continue
        ty = tid // tiles_x
        tx = tid - ty * tiles_x
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                # replay the forward walk to recover T_i and alpha_i
                t = 1.0
                m = 0
                for k in range(start, start + n_contrib[py, px]):
                    g = tile_list[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if power < cut[g] - 1e-9:
                        continue
                    gauss = math.exp(power)
                    alpha = opacity[g] * gauss
                    if alpha < alpha_min:
                        continue
                    buf_g[m] = g
                    buf_alpha[m] = alpha
                    buf_t[m] = t
                    buf_gauss[m] = gauss
                    m += 1
                    t *= 1.0 - alpha

                for c in range(n_ch):
                    accum[c] = 0.0
                accum_d = 0.0
                gd = grad_density[py, px]
                for j in range(m - 1, -1, -1):
                    g = buf_g[j]
                    alpha = buf_alpha[j]
                    t = buf_t[j]
                    w = t * alpha
                    d_alpha = gd * t * (1.0 - accum_d)
                    for c in range(n_ch):
                        go = grad_out[py, px, c]
                        a = attrs[g, c]
                        g_attrs[g, c] += w * go
                        d_alpha += go * t * (a - accum[c])
                        accum[c] = alpha * a + (1.0 - alpha) * accum[c]
                    accum_d = alpha + (1.0 - alpha) * accum_d

                    g_opacity[g] += d_alpha * buf_gauss[j]
                    d_power = d_alpha * alpha
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    g_conic[g, 0] += -0.5 * dx * dx * d_power
                    g_conic[g, 1] += -dx * dy * d_power
                    g_conic[g, 2] += -0.5 * dy * dy * d_power
                    g_mean2d[g, 0] += (conic[g, 0] * dx + conic[g, 1] * dy) * d_power
                    g_mean2d[g, 1] += (conic[g, 1] * dx + conic[g, 2] * dy) * d_power
    return g_mean2d, g_conic, g_opacity, g_attrs


@njit(cache=True)
def footprint_mass(height, width, tile, tiles_x, tile_ranges, tile_list, mean2d, conic, opacity, alpha_min):
    """Per-Gaussian sum of alpha over image pixels, ignoring transmittance."""
    mass = np.zeros(mean2d.shape[0])
    cut = np.log(alpha_min / opacity)
    for tid in range(tile_ranges.shape[0]):
        start = tile_ranges[tid, 0]
        end = tile_ranges[tid, 1]
        if start == end:
            continue
        ty = tid // tiles_x
        tx = tid - ty * tiles_x
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                for k in range(start, end):
                    g = tile_list[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if power < cut[g] - 1e-9:
                        continue
                    alpha = opacity[g] * math.exp(power)
                    if alpha >= alpha_min:
                        mass[g] += alpha
    return mass
