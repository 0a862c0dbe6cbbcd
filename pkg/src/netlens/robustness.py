"""Graded image distortions and softmax-difference grids between two models."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from netlens.classify import default_disease_classes
from netlens.errors import ContractError
from netlens.network import NetworkSpec, forward, softmax
from netlens.npyio import read_npy
from netlens.prng import SplitMix64, derive_seed

TABLE_VERSION = "netlens-distortions-v1"
SEVERITIES = (1, 2, 3, 4, 5)

# one parameter per severity 1..5
PARAMETERS = {
    "gaussian_noise": (0.04, 0.06, 0.08, 0.09, 0.10),  # sigma
    "shot_noise": (60, 25, 12, 5, 3),  # photons per unit intensity
    "impulse_noise": (0.01, 0.02, 0.03, 0.05, 0.07),  # flipped fraction
    "gaussian_blur": (0.5, 0.75, 1.0, 1.25, 1.5),  # sigma, kernel radius ceil(2 sigma)
    "pixelate": (2, 3, 4, 5, 6),  # block size
    "contrast": (0.75, 0.6, 0.45, 0.3, 0.15),  # factor about the image mean
    "brightness": (0.05, 0.10, 0.15, 0.20, 0.25),  # additive offset
    "saturate": (1.3, 1.6, 1.9, 2.2, 2.5),  # gray-mix factor
}
KINDS = tuple(PARAMETERS)
STOCHASTIC = ("gaussian_noise", "shot_noise", "impulse_noise")


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PARAMETERS:
            raise ContractError(f"unknown distortion {self.kind!r}; expected one of {KINDS}")
        if self.severity not in SEVERITIES:
            raise ContractError(f"severity {self.severity} outside 1..5")

    @property
    def parameter(self):
        return PARAMETERS[self.kind][self.severity - 1]


def image_seed(seed: int, index: int, kind: str, severity: int) -> int:
    """Noise seed for one image at one (kind, severity) cell."""
    return derive_seed(seed, index, kind, severity)


# ---------------------------------------------------------------- primitives

def gaussian_noise(img, sigma, rng: SplitMix64):
    return img + sigma * rng.normal(img.size).reshape(img.shape)


def _poisson(lam: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Poisson variates by CDF inversion of uniforms ``u``."""
    k = np.zeros(lam.shape)
    p = np.exp(-lam)
    cdf = p.copy()
    active = u > cdf
    while active.any():
        k[active] += 1
        p[active] *= lam[active] / k[active]
        cdf[active] += p[active]
        # guard against cdf stalling below u from rounding in the far tail
        active &= (u > cdf) & (p > 0)
    return k


def shot_noise(img, photons, rng: SplitMix64):
    u = rng.uniform(img.size).reshape(img.shape)
    return _poisson(img * photons, u) / photons


def impulse_noise(img, fraction, rng: SplitMix64):
    flip = rng.uniform(img.size).reshape(img.shape) < fraction
    salt = rng.uniform(img.size).reshape(img.shape) < 0.5
    out = img.copy()
    out[flip] = salt[flip].astype(np.float64)
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(2.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2) if sigma > 0 else (x == 0).astype(np.float64)
    return k / k.sum()


def gaussian_blur(img, sigma):
    k = gaussian_kernel(sigma)
    r = k.size // 2
    out = img
    for axis in (1, 2):
        pad = [(0, 0)] * 3
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="edge")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, kv in enumerate(k):
            acc += kv * np.take(padded, np.arange(i, i + n), axis=axis)
        out = acc
    return out


def pixelate(img, block):
    """Box-downscale to ``floor(H / block) x floor(W / block)`` cells, then nearest-upscale.

    Cells split the image evenly (sizes differ by at most one pixel), so the
    cell count falls strictly as the block grows and no remainder strip is
    left at full resolution.
    """
    block = int(block)
    if block <= 1:
        return img.copy()
    _, h, w = img.shape
    rows = (np.arange(max(1, h // block) + 1) * h) // max(1, h // block)
    cols = (np.arange(max(1, w // block) + 1) * w) // max(1, w // block)
    sums = np.add.reduceat(np.add.reduceat(img, rows[:-1], axis=1), cols[:-1], axis=2)
    rh, cw = np.diff(rows), np.diff(cols)
    means = sums / (rh[:, None] * cw[None, :])[None]
    return np.repeat(np.repeat(means, rh, axis=1), cw, axis=2)


def contrast(img, factor):
    mu = img.mean()
    return mu + factor * (img - mu)


def brightness(img, offset):
    return img + offset


def saturate(img, factor):
    """Mix with the per-pixel channel-mean gray; factors below 1 desaturate."""
    gray = img.mean(axis=0, keepdims=True)
    return gray + factor * (img - gray)


def apply_distortion(img: np.ndarray, spec: DistortionSpec, parameter=None) -> np.ndarray:
    """Distort a (C, H, W) image in [0, 1]; ``parameter`` overrides the table value."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ContractError(f"image must be (C, H, W), got shape {img.shape}")
    if not (np.all(img >= 0.0) and np.all(img <= 1.0)):
        raise ContractError("image values must lie in [0, 1]")
    p = spec.parameter if parameter is None else parameter
    rng = SplitMix64(spec.seed)
    kind = spec.kind
    if kind == "gaussian_noise":
        out = gaussian_noise(img, p, rng)
    elif kind == "shot_noise":
        out = shot_noise(img, p, rng)
    elif kind == "impulse_noise":
        out = impulse_noise(img, p, rng)
    elif kind == "gaussian_blur":
        out = gaussian_blur(img, p)
    elif kind == "pixelate":
        out = pixelate(img, p)
    elif kind == "contrast":
        out = contrast(img, p)
    elif kind == "brightness":
        out = brightness(img, p)
    else:
        out = saturate(img, p)
    return np.clip(out, 0.0, 1.0)


def distort_batch(images: np.ndarray, kind: str, severity: int, seed: int) -> np.ndarray:
    return np.stack([
        apply_distortion(img, DistortionSpec(kind, severity, image_seed(seed, i, kind, severity)))
        for i, img in enumerate(images)
    ])


# ---------------------------------------------------------------- grids

@dataclass
class RobustnessGrid:
    label_a: str
    label_b: str
    cells: dict = field(default_factory=dict)  # (kind, severity) -> (mean_delta, n)
    table_version: str = TABLE_VERSION

    def delta(self, kind: str, severity: int) -> float:
        return self.cells[(kind, severity)][0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["kind", "severity", "mean_delta", "n"])
        for (kind, sev), (mean, n) in self.cells.items():
            writer.writerow([kind, sev, repr(mean), n])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "model_a": self.label_a,
            "model_b": self.label_b,
            "table_version": self.table_version,
            "cells": [{"kind": k, "severity": s, "mean_delta": m, "n": n} for (k, s), (m, n) in self.cells.items()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def disease_probability(net: NetworkSpec, images: np.ndarray, disease_classes=None) -> np.ndarray:
    classes = default_disease_classes(net.classes) if disease_classes is None else tuple(disease_classes)
    logits, _ = forward(net, images)
    return softmax(logits)[:, list(classes)].sum(axis=1)


def _check_pair(model_a: NetworkSpec, model_b: NetworkSpec):
    if model_a.input_shape != model_b.input_shape or model_a.classes != model_b.classes:
        raise ContractError("models differ in input shape or class count")


def _mean_delta(model_a, model_b, batch, disease_classes):
    delta = disease_probability(model_a, batch, disease_classes) - disease_probability(model_b, batch, disease_classes)
    total = 0.0
    for d in delta:  # fixed-order summation
        total += float(d)
    return total / len(delta)


def softmax_delta_grid(
    model_a: NetworkSpec,
    model_b: NetworkSpec,
    images: np.ndarray,
    kinds=KINDS,
    severities=SEVERITIES,
    seed: int = 0,
    labels=("A", "B"),
    disease_classes=None,
) -> RobustnessGrid:
    """Mean ``p_A(disease) - p_B(disease)`` over ``images`` for each (kind, severity)."""
    _check_pair(model_a, model_b)
    images = np.asarray(images, dtype=np.float64)
    grid = RobustnessGrid(*labels)
    for kind in kinds:
        for sev in severities:
            batch = distort_batch(images, kind, sev, seed)
            grid.cells[(kind, int(sev))] = (_mean_delta(model_a, model_b, batch, disease_classes), len(images))
    return grid


def grid_from_directory(model_a, model_b, root, labels=("A", "B"), disease_classes=None) -> RobustnessGrid:
    """Score externally distorted images laid out as ``root/<kind>/<severity>/*.npy``.

    This is the hook for corruptions without an in-tree implementation
    (e.g. codec-based JPEG compression).
    """
    _check_pair(model_a, model_b)
    root = Path(root)
    grid = RobustnessGrid(*labels)
    for kind_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for sev_dir in sorted((p for p in kind_dir.iterdir() if p.is_dir()), key=lambda p: p.name):
            files = sorted(sev_dir.glob("*.npy"))
            if not files:
                continue
            batch = np.stack([read_npy(f) for f in files]).astype(np.float64)
            grid.cells[(kind_dir.name, int(sev_dir.name))] = (
                _mean_delta(model_a, model_b, batch, disease_classes), len(files))
    return grid
