"""Terrain feature rasters derived from a DEM.

Provides the slope-angle map, the release-zone mask (cells steep enough for
avalanches to start), the potential-angle-of-reach (PAR) map, and
class-conditional feature histograms.

PAR at a cell p is the maximum elevation angle

    theta(x) = atan((z(x) - z(p)) / d(p, x))

over all release cells x != p whose horizontal center distance d(p, x) is
within a configurable radius. Two implementations are provided:
``par_bruteforce`` is a direct transcription of the definition and serves as
the oracle; ``par_fast`` is a block branch-and-bound scan (numba JIT,
parallel over rows) that must agree with the oracle to within 1e-6 degrees.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .raster import GridGeometry, Raster, _require_same_grid

__all__ = [
    "ParConfig",
    "ReleaseMask",
    "Histogram",
    "compute_slope",
    "compute_release_mask",
    "par_bruteforce",
    "par_fast",
    "class_histograms",
]

_PAR_BLOCK = 16  # block edge (cells) for the branch-and-bound release index


@dataclass(frozen=True)
class ParConfig:
    """Parameters of the release-zone and PAR computation (distances in meters)."""

    radius: float = 4000.0
    release_min: float = 30.0
    release_max: float = 50.0
    empty_value: float = 0.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not (0.0 <= self.release_min < self.release_max <= 90.0):
            raise ValueError(
                f"need 0 <= release_min < release_max <= 90, got "
                f"[{self.release_min}, {self.release_max}]"
            )


@dataclass(frozen=True)
class ReleaseMask:
    """Boolean grid of potential avalanche release cells."""

    geometry: GridGeometry
    flags: np.ndarray

    def __post_init__(self):
        flags = np.ascontiguousarray(self.flags, dtype=bool)
        if flags.shape != (self.geometry.nrows, self.geometry.ncols):
            raise ValueError("release flags shape does not match geometry")
        flags.setflags(write=False)
        object.__setattr__(self, "flags", flags)


@dataclass(frozen=True)
class Histogram:
    """Per-class counts of a feature raster over shared bins."""

    bin_edges: np.ndarray
    counts_avalanche: np.ndarray
    counts_background: np.ndarray

    def normalized(self) -> tuple[np.ndarray, np.ndarray]:
        """Counts normalized to unit sum per class (zeros if a class is empty)."""
        out = []
        for c in (self.counts_avalanche, self.counts_background):
            total = c.sum()
            out.append(c / total if total > 0 else c.astype(float))
        return out[0], out[1]


def compute_slope(dem: Raster) -> Raster:
    """Slope angle in degrees from the DEM gradient.

    Central differences over 2*cell_size in the interior, one-sided at the
    borders. Cells whose stencil touches a nodata cell become nodata.
    """
    if dem.nrows < 2 or dem.ncols < 2:
        raise ValueError(f"slope needs at least a 2x2 grid, got {dem.ncols}x{dem.nrows}")
    z = dem.values.astype(np.float64)
    bad = dem.nodata_mask()
    gy, gx = np.gradient(z, dem.cell_size)
    slope = np.degrees(np.arctan(np.hypot(gx, gy))).astype(np.float32)

    if bad.any():
        # a nodata cell poisons every cell whose difference stencil reads it
        poisoned = bad.copy()
        poisoned[1:, :] |= bad[:-1, :]
        poisoned[:-1, :] |= bad[1:, :]
        poisoned[:, 1:] |= bad[:, :-1]
        poisoned[:, :-1] |= bad[:, 1:]
        slope[poisoned] = np.float32(dem.nodata)
    return dem.with_values(slope)


def compute_release_mask(slope: Raster, cfg: ParConfig) -> ReleaseMask:
    """Cells with slope in the closed release interval; nodata cells are excluded."""
    s = slope.values
    flags = (s >= cfg.release_min) & (s <= cfg.release_max)
    flags &= ~slope.nodata_mask()
    return ReleaseMask(slope.geometry, flags)


# ---------------------------------------------------------------------------
# PAR, brute force (oracle)
# ---------------------------------------------------------------------------


def par_bruteforce(dem: Raster, mask: ReleaseMask, cfg: ParConfig) -> Raster:
    """Direct evaluation of the PAR definition.

    For every cell the elevation angle to every release cell within the
    radius is evaluated and the maximum kept; pixels are processed in small
    column chunks to bound memory. O(npixels * nrelease); the correctness
    oracle for ``par_fast``.
    """
    if dem.geometry != mask.geometry:
        raise ValueError("DEM and release mask geometries differ")
    z = dem.values.astype(np.float64)
    nrows, ncols = z.shape
    cell = float(dem.cell_size)
    r2_cells = (cfg.radius / cell) ** 2

    rel_r, rel_c = np.nonzero(mask.flags)
    out = np.full((nrows, ncols), float(cfg.empty_value), dtype=np.float64)

    if rel_r.size:
        rel_rf = rel_r.astype(np.float64)
        rel_cf = rel_c.astype(np.float64)
        rel_z = z[rel_r, rel_c]
        chunk = max(1, min(ncols, 4_000_000 // max(1, rel_r.size)))
        for i in range(nrows):
            dr2 = (rel_rf - i) ** 2
            for j0 in range(0, ncols, chunk):
                cols = np.arange(j0, min(j0 + chunk, ncols), dtype=np.float64)
                d2 = dr2[None, :] + (rel_cf[None, :] - cols[:, None]) ** 2
                reach = (d2 <= r2_cells) & (d2 > 0.0)
                if not reach.any():
                    continue
                dz = rel_z[None, :] - z[i, j0:j0 + cols.size][:, None]
                d = cell * np.sqrt(d2, where=reach, out=np.ones_like(d2))
                theta = np.full_like(d2, -np.inf)
                np.arctan(dz / d, where=reach, out=theta)
                best = theta.max(axis=1)
                hit = best > -np.inf
                out[i, j0:j0 + cols.size][hit] = np.degrees(best[hit])

    out = out.astype(np.float32)
    out[dem.nodata_mask()] = np.float32(dem.nodata)
    return dem.with_values(out)


# ---------------------------------------------------------------------------
# PAR, fast block branch-and-bound (numba)
# ---------------------------------------------------------------------------

_PAR_KERNEL = None


def _get_par_kernel():
    """Compile the numba kernel on first use."""
    global _PAR_KERNEL
    if _PAR_KERNEL is not None:
        return _PAR_KERNEL

    from numba import njit, prange

    @njit(cache=True, parallel=True)
    def kernel(z, cell, r2_cells, radius_cells, empty_value, gzmax,
               block, nbr, nbc, block_zmax, block_ptr, cell_rows, cell_cols):
        nrows, ncols = z.shape
        out = np.empty((nrows, ncols), dtype=np.float64)
        max_ring = int(np.ceil(radius_cells / block)) + 1
        for i in prange(nrows):
            for j in range(ncols):
                zp = z[i, j]
                best_t = -1e300  # running max of tan(theta)
                found = False
                bi0 = i // block
                bj0 = j // block
                gz = gzmax - zp
                for ring in range(0, max_ring + 1):
                    if found and ring >= 1:
                        # nothing beyond this ring is closer than dmin cells;
                        # the best remaining tan is bounded via the global
                        # release-cell elevation maximum. For a negative
                        # difference the bound is attained at the FAR end of
                        # the remaining annulus (the radius), not the near end.
                        dmin = (ring - 1) * block + 1.0
                        dbound = dmin if gz >= 0.0 else radius_cells
                        if gz <= best_t * cell * dbound:
                            break
                    for bi in range(bi0 - ring, bi0 + ring + 1):
                        if bi < 0 or bi >= nbr:
                            continue
                        on_rim_r = (bi == bi0 - ring) or (bi == bi0 + ring)
                        for bj in range(bj0 - ring, bj0 + ring + 1):
                            if bj < 0 or bj >= nbc:
                                continue
                            if not (on_rim_r or bj == bj0 - ring or bj == bj0 + ring):
                                continue
                            b = bi * nbc + bj
                            p0 = block_ptr[b]
                            p1 = block_ptr[b + 1]
                            if p0 == p1:
                                continue
                            # closest point of block b to (i, j), in cells
                            r0 = bi * block
                            r1 = min(r0 + block, nrows) - 1
                            c0 = bj * block
                            c1 = min(c0 + block, ncols) - 1
                            ddr = 0.0
                            if i < r0:
                                ddr = r0 - i
                            elif i > r1:
                                ddr = i - r1
                            ddc = 0.0
                            if j < c0:
                                ddc = c0 - j
                            elif j > c1:
                                ddc = j - c1
                            dmin2 = ddr * ddr + ddc * ddc
                            if dmin2 > r2_cells:
                                continue
                            if found:
                                gb = block_zmax[b] - zp
                                if gb >= 0.0:
                                    # closest approach maximizes a non-negative tan
                                    if dmin2 > 0.0 and gb <= best_t * cell * np.sqrt(dmin2):
                                        continue
                                else:
                                    # negative difference: farthest reachable
                                    # point of the block maximizes the tan
                                    fr = max(i - r0, r1 - i)
                                    fc = max(j - c0, c1 - j)
                                    dmax = min(np.sqrt(float(fr * fr + fc * fc)), radius_cells)
                                    if gb <= best_t * cell * dmax:
                                        continue
                            for p in range(p0, p1):
                                rr = cell_rows[p]
                                cc = cell_cols[p]
                                di = rr - i
                                dj = cc - j
                                d2 = float(di * di + dj * dj)
                                if d2 > r2_cells or d2 == 0.0:
                                    continue
                                t = (z[rr, cc] - zp) / (cell * np.sqrt(d2))
                                if not found or t > best_t:
                                    best_t = t
                                    found = True
                if found:
                    out[i, j] = np.degrees(np.arctan(best_t))
                else:
                    out[i, j] = empty_value
        return out

    _PAR_KERNEL = kernel
    return kernel


def _block_index(flags: np.ndarray, z: np.ndarray, block: int):
    """CSR-style listing of release cells per block plus per-block elevation max."""
    nrows, ncols = flags.shape
    nbr = (nrows + block - 1) // block
    nbc = (ncols + block - 1) // block
    rel_r, rel_c = np.nonzero(flags)
    bid = (rel_r // block) * nbc + (rel_c // block)
    order = np.argsort(bid, kind="stable")
    rel_r = rel_r[order].astype(np.int64)
    rel_c = rel_c[order].astype(np.int64)
    bid = bid[order]
    block_ptr = np.zeros(nbr * nbc + 1, dtype=np.int64)
    np.add.at(block_ptr, bid + 1, 1)
    np.cumsum(block_ptr, out=block_ptr)
    block_zmax = np.full(nbr * nbc, -np.inf, dtype=np.float64)
    if rel_r.size:
        np.maximum.at(block_zmax, bid, z[rel_r, rel_c])
    return nbr, nbc, block_zmax, block_ptr, rel_r, rel_c


def set_num_threads(n: int | None = None) -> int:
    """Cap numba worker threads; honors the AVASEG_THREADS environment variable."""
    import numba

    if n is None:
        env = os.environ.get("AVASEG_THREADS")
        n = int(env) if env else numba.config.NUMBA_NUM_THREADS
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


def par_fast(dem: Raster, mask: ReleaseMask, cfg: ParConfig) -> Raster:
    """PAR equal to ``par_bruteforce`` within 1e-6 degrees, via pruned block scan.

    Release cells are bucketed into square blocks; per pixel, blocks are
    visited in rings of increasing distance and skipped whenever the block's
    elevation maximum cannot beat the current best angle. Deterministic for
    any worker count (each output cell is computed independently).
    """
    if dem.geometry != mask.geometry:
        raise ValueError("DEM and release mask geometries differ")
    if not mask.flags.any():
        out = np.full(mask.flags.shape, np.float32(cfg.empty_value), dtype=np.float32)
        out[dem.nodata_mask()] = np.float32(dem.nodata)
        return dem.with_values(out)

    z = dem.values.astype(np.float64)
    cell = float(dem.cell_size)
    radius_cells = cfg.radius / cell
    r2_cells = radius_cells ** 2

    set_num_threads()
    kernel = _get_par_kernel()
    nbr, nbc, block_zmax, block_ptr, rel_r, rel_c = _block_index(mask.flags, z, _PAR_BLOCK)
    gzmax = float(z[mask.flags].max())
    out = kernel(
        z, cell, r2_cells, radius_cells, float(cfg.empty_value), gzmax,
        _PAR_BLOCK, nbr, nbc, block_zmax, block_ptr, rel_r, rel_c,
    ).astype(np.float32)
    out[dem.nodata_mask()] = np.float32(dem.nodata)
    return dem.with_values(out)


# ---------------------------------------------------------------------------
# Class-conditional histograms
# ---------------------------------------------------------------------------


def class_histograms(feature: Raster, labels: Raster, bin_width: float) -> Histogram:
    """Histogram a feature raster separately for avalanche and background pixels.

    Bin edges are multiples of ``bin_width`` covering the valid data range;
    nodata pixels (in either raster) are excluded.
    """
    _require_same_grid(feature, labels, "class_histograms")
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    lab = labels.values
    valid = ~(feature.nodata_mask() | labels.nodata_mask())
    uniq = np.unique(lab[valid])
    if not np.isin(uniq, (0.0, 1.0)).all():
        raise ValueError(f"labels must be binary, found values {uniq[:8]}")

    feat = feature.values[valid].astype(np.float64)
    is_av = lab[valid] == 1.0
    if feat.size:
        lo = np.floor(feat.min() / bin_width) * bin_width
        hi = np.ceil(feat.max() / bin_width) * bin_width
        if hi <= lo:
            hi = lo + bin_width
    else:
        lo, hi = 0.0, bin_width
    edges = np.arange(lo, hi + bin_width / 2, bin_width)
    counts_av, _ = np.histogram(feat[is_av], bins=edges)
    counts_bg, _ = np.histogram(feat[~is_av], bins=edges)
    return Histogram(edges, counts_av, counts_bg)


def write_histogram_csv(hist: Histogram, path) -> None:
    """CSV rows `bin_lo,bin_hi,avalanche,background`."""
    with open(path, "w", newline="\n") as fh:
        fh.write("bin_lo,bin_hi,avalanche,background\n")
        for lo, hi, a, b in zip(
            hist.bin_edges[:-1], hist.bin_edges[1:],
            hist.counts_avalanche, hist.counts_background,
        ):
            fh.write(f"{lo!r},{hi!r},{int(a)},{int(b)}\n")
