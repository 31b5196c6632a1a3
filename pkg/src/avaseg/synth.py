"""Synthetic DEMs, scene pairs and avalanche labels for desk-scale runs.

Terrain comes from power-law-filtered spectral noise. Debris blobs are
planted where deposits are physically plausible (moderate slope below
release zones, high reach angle) and elongated along the local downhill
direction. An equal number of unlabeled decoy brightenings is planted in
implausible terrain (low reach angle), mimicking the bright terrain
structures that confuse purely backscatter-based detection, so the terrain
channels carry real discriminative value.

Backscatter arithmetic is done directly in dB (additive debris gain), which
is adequate for pipeline testing.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, asdict, replace

import numpy as np
from scipy import ndimage

from .raster import GridGeometry, Raster, write_raster
from .sarprep import (
    CHANNEL_NAMES, ScenePair, build_feature_stack, extract_training_patches,
    clip_db, save_patch_archive,
)
from .topo import ParConfig, compute_release_mask, compute_slope, par_fast

__all__ = ["SynthConfig", "synth_dem", "synth_scene_pair", "synth_dataset"]

logger = logging.getLogger(__name__)

DEPOSIT_SLOPE_MIN = 5.0
DEPOSIT_SLOPE_MAX = 30.0


@dataclass(frozen=True)
class SynthConfig:
    size: int = 512
    cell_size: float = 20.0
    relief_amplitude: float = 1200.0
    roughness: float = 2.0
    n_avalanches: int = 12
    debris_gain_db: float = 6.0
    noise_db: float = 2.0
    seed: int = 7

    def __post_init__(self):
        if self.size % 16:
            raise ValueError(f"size must be divisible by 16, got {self.size}")
        if self.n_avalanches < 0:
            raise ValueError("n_avalanches must be >= 0")
        if self.noise_db < 0:
            raise ValueError("noise_db must be >= 0")


def synth_dem(cfg: SynthConfig) -> Raster:
    """Smooth random terrain: white noise shaped by a power-law spectrum."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    n = cfg.size
    noise = rng.standard_normal((n, n))
    spec = np.fft.rfft2(noise)
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.rfftfreq(n)[None, :]
    freq = np.hypot(fy, fx)
    freq[0, 0] = 1.0
    spec *= freq ** (-cfg.roughness)
    spec[0, 0] = 0.0
    z = np.fft.irfft2(spec, s=(n, n))
    z -= z.min()
    peak = z.max()
    if peak > 0 and cfg.relief_amplitude > 0:
        z *= cfg.relief_amplitude / peak
    else:
        z[:] = 0.0
    geom = GridGeometry(n, n, 0.0, 0.0, cfg.cell_size)
    return Raster(geom, z.astype(np.float32))


def _plant_blobs(
    admissible: np.ndarray,
    downhill: tuple[np.ndarray, np.ndarray],
    count: int,
    rng: np.random.Generator,
    length_range=(14.0, 30.0),
    width_range=(3.0, 7.0),
    min_separation: int = 24,
) -> tuple[np.ndarray, int]:
    """Grow up to ``count`` elongated blobs inside the admissible set."""
    n = admissible.shape[0]
    mask = np.zeros_like(admissible)
    cand_r, cand_c = np.nonzero(admissible)
    if cand_r.size == 0 or count == 0:
        return mask, 0
    order = rng.permutation(cand_r.size)
    seeds: list[tuple[int, int]] = []
    for k in order:
        r, c = int(cand_r[k]), int(cand_c[k])
        if any(max(abs(r - sr), abs(c - sc)) < min_separation for sr, sc in seeds):
            continue
        seeds.append((r, c))
        if len(seeds) == count:
            break

    dhr, dhc = downhill
    planted = 0
    for r, c in seeds:
        ur, uc = dhr[r, c], dhc[r, c]
        norm = np.hypot(ur, uc)
        if norm < 1e-12:
            ang = rng.uniform(0, 2 * np.pi)
            ur, uc = np.cos(ang), np.sin(ang)
        else:
            ur, uc = ur / norm, uc / norm
        half_len = rng.uniform(*length_range) / 2.0
        half_wid = rng.uniform(*width_range) / 2.0
        cr = r + ur * half_len
        cc = c + uc * half_len
        reach = int(np.ceil(half_len + half_wid)) + 1
        r0, r1 = max(0, int(cr) - reach), min(n, int(cr) + reach + 1)
        c0, c1 = max(0, int(cc) - reach), min(n, int(cc) + reach + 1)
        rows, cols = np.mgrid[r0:r1, c0:c1]
        ar = (rows - cr) * ur + (cols - cc) * uc
        ac = -(rows - cr) * uc + (cols - cc) * ur
        ellipse = (ar / half_len) ** 2 + (ac / half_wid) ** 2 <= 1.0
        blob = ellipse & admissible[r0:r1, c0:c1]
        if not blob[r - r0, c - c0]:
            blob[r - r0, c - c0] = True
        # keep only the piece connected to the seed
        lab, _ = ndimage.label(blob, structure=np.ones((3, 3), dtype=int))
        blob = lab == lab[r - r0, c - c0]
        mask[r0:r1, c0:c1] |= blob
        planted += 1
    return mask, planted


def synth_scene_pair(cfg: SynthConfig, dem: Raster,
                     par_cfg: ParConfig = ParConfig()) -> tuple[ScenePair, Raster]:
    """Reference/activity dB rasters plus the avalanche label mask.

    Debris sits where the deposit predicate holds (slope in [5, 30] degrees
    and reach angle above the scene median); decoy brightenings of the same
    strength sit where it fails, and are not labeled.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    slope = compute_slope(dem)
    release = compute_release_mask(slope, par_cfg)
    par = par_fast(dem, release, par_cfg)

    par_median = float(np.median(par.values))
    sl = slope.values
    admissible = (sl >= DEPOSIT_SLOPE_MIN) & (sl <= DEPOSIT_SLOPE_MAX) & (par.values > par_median)
    decoy_zone = (sl <= DEPOSIT_SLOPE_MAX) & (par.values <= par_median)

    gy, gx = np.gradient(dem.values.astype(np.float64), dem.cell_size)
    downhill = (-gy, -gx)

    labels_arr, planted = _plant_blobs(admissible, downhill, cfg.n_avalanches, rng)
    if planted < cfg.n_avalanches:
        logger.warning("planted %d of %d requested avalanches (admissible terrain exhausted)",
                       planted, cfg.n_avalanches)
    decoys, _ = _plant_blobs(decoy_zone, downhill, cfg.n_avalanches, rng)
    decoys &= ~labels_arr
    bright = (labels_arr | decoys).astype(np.float64) * cfg.debris_gain_db

    n = cfg.size

    def channel(base):
        return base + rng.normal(0.0, cfg.noise_db, (n, n))

    vv_base = rng.uniform(-20.0, -10.0)
    vh_base = rng.uniform(-20.0, -10.0)
    vv_ref = channel(vv_base)
    vh_ref = channel(vh_base)
    vv_act = vv_ref + bright + rng.normal(0.0, cfg.noise_db, (n, n))
    vh_act = vh_ref + bright + rng.normal(0.0, cfg.noise_db, (n, n))

    geom = dem.geometry
    mk = lambda a: Raster(geom, a.astype(np.float32))
    day = int(rng.integers(1, 20))
    pair = ScenePair(
        vv_ref=mk(vv_ref), vv_act=mk(vv_act), vh_ref=mk(vh_ref), vh_act=mk(vh_act),
        orbit=f"{cfg.seed % 1000:03d}",
        t_ref=f"2021-01-{day:02d}T05:30:00Z", t_act=f"2021-01-{day + 6:02d}T05:30:00Z",
    )
    labels = Raster(geom, labels_arr.astype(np.float32))
    return pair, labels


def synth_dataset(cfg: SynthConfig, n_scenes: int, out_dir, patch_size: int = 64,
                  par_cfg: ParConfig = ParConfig()) -> dict:
    """Write scenes, feature stacks, labels and a positive-patch archive.

    The last scene is held out as the test scene; patches from the others are
    split 90/10 into train/validation in the archive index. Returns the
    dataset manifest (also written as ``manifest.json``).
    """
    if n_scenes < 2:
        raise ValueError("need at least 2 scenes (the last one is held out for testing)")
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)

    scene_records = []
    manifest_scenes = []
    all_patches = []
    for i in range(n_scenes):
        scene_cfg = replace(cfg, seed=int(np.random.SeedSequence(cfg.seed, spawn_key=(2, i)).generate_state(1)[0]))
        dem = synth_dem(scene_cfg)
        pair, labels = synth_scene_pair(scene_cfg, dem, par_cfg)
        slope = compute_slope(dem)
        release = compute_release_mask(slope, par_cfg)
        par = par_fast(dem, release, par_cfg)
        stack = build_feature_stack(
            ScenePair(clip_db(pair.vv_ref), clip_db(pair.vv_act),
                      clip_db(pair.vh_ref), clip_db(pair.vh_act),
                      pair.orbit, pair.t_ref, pair.t_act),
            slope, par)

        sid = f"scene{i:03d}"
        paths = {}
        for name, raster in (("dem", dem), ("labels", labels),
                             ("vv_ref", pair.vv_ref), ("vv_act", pair.vv_act),
                             ("vh_ref", pair.vh_ref), ("vh_act", pair.vh_act)):
            rel = f"{sid}_{name}.rst"
            write_raster(raster, os.path.join(out_dir, rel))
            paths[name] = rel
        stack_paths = {}
        for name, raster in zip(CHANNEL_NAMES, stack.channels()):
            rel = f"{sid}_stack_{name}.rst"
            write_raster(raster, os.path.join(out_dir, rel))
            stack_paths[name] = rel

        is_test = i == n_scenes - 1
        if not is_test:
            all_patches.extend(extract_training_patches(
                stack, labels, patch_size, require_positive=True, scene_id=sid))

        orbit = f"{i:03d}"
        scene_records.append({"id": f"{sid}_ref", "orbit": orbit, "timestamp": pair.t_ref,
                              "vv_path": paths["vv_ref"], "vh_path": paths["vh_ref"]})
        scene_records.append({"id": f"{sid}_act", "orbit": orbit, "timestamp": pair.t_act,
                              "vv_path": paths["vv_act"], "vh_path": paths["vh_act"]})
        manifest_scenes.append({
            "id": sid, "orbit": orbit, "test": is_test, "paths": paths, "stack": stack_paths,
        })

    with open(os.path.join(out_dir, "scenes.json"), "w") as fh:
        json.dump(scene_records, fh, indent=1, sort_keys=True)

    # deterministic 90/10 patch split
    split_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(3,)))
    order = split_rng.permutation(len(all_patches))
    n_val = max(1, int(round(0.1 * len(all_patches)))) if all_patches else 0
    val_ids = set(order[:n_val].tolist())
    split = ["val" if i in val_ids else "train" for i in range(len(all_patches))]

    patch_dir = os.path.join(out_dir, "patches")
    save_patch_archive(all_patches, patch_dir, cell_size=cfg.cell_size,
                       extra={"splits": split})

    manifest = {
        "config": asdict(cfg),
        "par_config": asdict(par_cfg),
        "n_scenes": n_scenes,
        "patch_size": patch_size,
        "patch_dir": "patches",
        "scenes": manifest_scenes,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest
