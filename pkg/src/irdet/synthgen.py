"""Synthetic infrared-like scene generator.

Scenes are multi-octave value-noise clutter plus white noise plus small
isotropic Gaussian target bumps. The ground-truth mask is exact: a pixel
belongs to a target iff that target's bump exceeds half its peak
amplitude (radius sigma*sqrt(2 ln 2)). Fully seeded and reproducible.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .pgm import write_gray, write_mask, read_gray, read_mask


@dataclass
class SceneParams:
    size: tuple = (96, 96)
    target_count: tuple = (1, 3)  # inclusive range
    sigma_range: tuple = (0.8, 2.0)  # <= 3 px: targets stay small
    amplitude_range: tuple = (0.35, 0.9)
    clutter_octaves: int = 3
    clutter_amplitude: float = 0.25
    noise_sigma: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.sigma_range[1] > 3.0:
            raise ValueError("target sigma must stay <= 3 px")
        if self.amplitude_range[0] <= 0:
            raise ValueError("target amplitudes must be positive")


@dataclass
class SyntheticScene:
    image: np.ndarray  # (h, w) in [0, 1]
    mask: np.ndarray  # (h, w) uint8 {0, 1}
    instances: list = field(default_factory=list)  # dicts: cx, cy, amp, sigma, snr


def _value_noise(rng, h, w, octaves, amplitude):
    """Sum of bilinearly upsampled random grids, halving amplitude per octave."""
    out = np.zeros((h, w))
    amp = amplitude
    cells = 4
    for _ in range(octaves):
        gh, gw = cells + 1, cells + 1
        grid = rng.random((gh, gw))
        ys = np.linspace(0, cells, h, endpoint=False)
        xs = np.linspace(0, cells, w, endpoint=False)
        y0 = np.floor(ys).astype(int)
        x0 = np.floor(xs).astype(int)
        ty = (ys - y0)[:, None]
        tx = (xs - x0)[None, :]
        g00 = grid[y0][:, x0]
        g01 = grid[y0][:, x0 + 1]
        g10 = grid[y0 + 1][:, x0]
        g11 = grid[y0 + 1][:, x0 + 1]
        layer = (
            g00 * (1 - ty) * (1 - tx)
            + g01 * (1 - ty) * tx
            + g10 * ty * (1 - tx)
            + g11 * ty * tx
        )
        out += amp * (layer - 0.5)
        amp *= 0.5
        cells *= 2
    return out


def _gaussian_bump(h, w, cy, cx, amp, sigma):
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    return amp * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * sigma**2))


def generate_scene(params: SceneParams) -> SyntheticScene:
    rng = np.random.default_rng(params.seed)
    h, w = params.size
    background = 0.35 + _value_noise(
        rng, h, w, params.clutter_octaves, params.clutter_amplitude
    )
    background += rng.normal(0.0, params.noise_sigma, (h, w))

    n_targets = int(rng.integers(params.target_count[0], params.target_count[1] + 1))
    target_field = np.zeros((h, w))
    mask = np.zeros((h, w), dtype=np.uint8)
    instances = []
    margin = 8
    for _ in range(n_targets):
        for attempt in range(64):
            cy = rng.uniform(margin, h - margin)
            cx = rng.uniform(margin, w - margin)
            amp = rng.uniform(*params.amplitude_range)
            sigma = rng.uniform(*params.sigma_range)
            bump = _gaussian_bump(h, w, cy, cx, amp, sigma)
            target_mask = bump > amp / 2.0
            # keep instances separated so mask components match instances
            if target_mask.sum() == 0 or np.logical_and(
                mask, _gaussian_bump(h, w, cy, cx, 1.0, sigma * 3) > 0.01
            ).any():
                continue
            target_field += bump
            mask |= target_mask.astype(np.uint8)
            instances.append({"cx": cx, "cy": cy, "amp": amp, "sigma": sigma})
            break
        else:
            raise RuntimeError(
                f"could not place target after 64 attempts (seed {params.seed})"
            )
    image = np.clip(background + target_field, 0.0, 1.0)
    scene = SyntheticScene(image=image, mask=mask, instances=instances)
    _attach_snr(scene)
    return scene


def _attach_snr(scene):
    from .metrics import connected_components, snr_of_target

    comps = connected_components(scene.mask)
    by_centroid = []
    for inst in scene.instances:
        best = None
        best_d = None
        for c in comps:
            d = (c.centroid[0] - inst["cy"]) ** 2 + (c.centroid[1] - inst["cx"]) ** 2
            if best_d is None or d < best_d:
                best, best_d = c, d
        snr = snr_of_target(scene.image, best, scene.mask) if best else None
        inst["snr"] = snr
        by_centroid.append(best)


# -- disk layout ---------------------------------------------------------


def write_scene(prefix, scene):
    """Writes <prefix>.pgm, <prefix>_mask.pgm, <prefix>_instances.csv."""
    write_gray(prefix + ".pgm", scene.image)
    write_mask(prefix + "_mask.pgm", scene.mask)
    with open(prefix + "_instances.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cx", "cy", "amp", "sigma", "snr"])
        for inst in scene.instances:
            writer.writerow(
                [inst["cx"], inst["cy"], inst["amp"], inst["sigma"], inst["snr"]]
            )


def read_scene(prefix):
    image = read_gray(prefix + ".pgm")
    mask = read_mask(prefix + "_mask.pgm")
    instances = []
    with open(prefix + "_instances.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            instances.append({k: float(v) if v != "None" else None for k, v in row.items()})
    return SyntheticScene(image=image, mask=mask, instances=instances)


def generate_corpus(out_dir, count, params: SceneParams, seed=None):
    """Writes `count` scenes plus manifest.csv; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    base_seed = params.seed if seed is None else seed
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "mask", "seed"])
        for i in range(count):
            scene_seed = base_seed + i
            p = SceneParams(**{**params.__dict__, "seed": scene_seed})
            scene = generate_scene(p)
            prefix = os.path.join(out_dir, f"scene_{i:05d}")
            write_scene(prefix, scene)
            writer.writerow(
                [
                    os.path.basename(prefix) + ".pgm",
                    os.path.basename(prefix) + "_mask.pgm",
                    scene_seed,
                ]
            )
    return manifest


def load_corpus(manifest_path):
    """Returns (images, masks) lists from a manifest."""
    root = os.path.dirname(os.path.abspath(manifest_path))
    images, masks = [], []
    with open(manifest_path, newline="") as fh:
        for row in csv.DictReader(fh):
            images.append(read_gray(os.path.join(root, row["image"])))
            masks.append(read_mask(os.path.join(root, row["mask"])))
    return images, masks
