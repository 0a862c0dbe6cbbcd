"""LRP with the alpha=1, beta=0 rule.

For a weighted layer with inputs ``x_j`` and weights ``w_jk`` the positive
contributions ``z+_jk = max(0, x_j w_jk)`` redistribute upstream relevance::

    R_j = sum_k z+_jk / (sum_j' z+_j'k + max(0, b_k) + eps) * R_k

The rule is applied at every layer, including the one that reads the image.
Positive bias only enlarges the denominator, so with non-zero biases a share
of the relevance is absorbed and the input total falls short of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from netlens.errors import ContractError, NumericError, SpecError
from netlens.network import (
    INPUT,
    LayerSpec,
    NetworkSpec,
    conv2d,
    conv2d_transpose,
    forward,
    pool_windows,
)

EPS = 1e-9
CONSERVATION_TOL = 1e-4
SEED_MODES = ("logit", "unit")


@dataclass
class RelevanceMap:
    layers: dict[str, np.ndarray]  # relevance at each layer's output, per sample
    input: np.ndarray  # (C, H, W), channel resolved
    target_class: int
    seed_mode: str
    seed_value: float

    @property
    def conservation_gap(self) -> float:
        """``|sum(input relevance) - seed| / |seed|``."""
        if self.seed_value == 0.0:
            return 0.0 if not self.input.any() else float("inf")
        return abs(float(self.input.sum()) - self.seed_value) / abs(self.seed_value)

    @property
    def conservation_broken(self) -> bool:
        return self.conservation_gap > CONSERVATION_TOL

    def layer_sums(self) -> dict[str, float]:
        return {name: float(r.sum()) for name, r in self.layers.items()}


def _split_signs(x, w):
    return np.maximum(x, 0.0), np.minimum(x, 0.0), np.maximum(w, 0.0), np.minimum(w, 0.0)


def _ratio(r, den):
    # a denominator of exactly zero means no positive contribution reached it
    out = np.zeros_like(den)
    np.divide(r, den, out=out, where=den != 0.0)
    return out


def lrp_dense(x, w, b, r):
    xp, xn, wp, wn = _split_signs(x, w)
    den = xp @ wp.T + xn @ wn.T
    den = np.where(den > 0.0, den + np.maximum(b, 0.0) + EPS, 0.0)
    s = _ratio(r, den)
    return xp * (s @ wp) + xn * (s @ wn)


def lrp_conv(x, w, b, r, stride, pad):
    xp, xn, wp, wn = _split_signs(x, w)
    den = conv2d(xp, wp, stride, pad) + conv2d(xn, wn, stride, pad)
    den = np.where(den > 0.0, den + np.maximum(b, 0.0)[None, :, None, None] + EPS, 0.0)
    s = _ratio(r, den)
    return xp * conv2d_transpose(s, wp, x.shape, stride, pad) + xn * conv2d_transpose(s, wn, x.shape, stride, pad)


def lrp_maxpool(x, r, window, stride):
    n, c, h, w = x.shape
    wins = pool_windows(x, window, stride)
    ho, wo = wins.shape[2:4]
    arg = wins.argmax(axis=-1)  # first maximum on ties
    dy, dx = np.divmod(arg, window)
    rows = np.arange(ho)[None, None, :, None] * stride + dy
    cols = np.arange(wo)[None, None, None, :] * stride + dx
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    out = np.zeros_like(x)
    np.add.at(out, (np.broadcast_to(nn, rows.shape), np.broadcast_to(cc, rows.shape), rows, cols), r)
    return out


def lrp_global_avgpool(x, r):
    # uniform positive weights 1/(H*W): only positive activations take a share
    xp = np.maximum(x, 0.0)
    den = xp.sum(axis=(2, 3))
    den = np.where(den > 0.0, den + EPS, 0.0)
    return xp * _ratio(r, den)[:, :, None, None]


def lrp_add(a, b, r):
    pa, pb = np.maximum(a, 0.0), np.maximum(b, 0.0)
    tot = pa + pb
    share = np.full_like(tot, 0.5)
    np.divide(pa, tot, out=share, where=tot > 0.0)
    return share * r, (1.0 - share) * r


def lrp_affine(x, scale, shift, r):
    scale = np.asarray(scale, dtype=np.float64)[None, :, None, None]
    shift = np.asarray(shift, dtype=np.float64)[None, :, None, None]
    z = np.maximum(x * scale, 0.0)
    den = np.where(z > 0.0, z + np.maximum(shift, 0.0) + EPS, 0.0)
    return z * _ratio(r, den)


def lrp_rule(layer: LayerSpec, inputs: list[np.ndarray], relevance: np.ndarray) -> list[np.ndarray]:
    """Relevance at each of ``layer``'s inputs, given relevance at its output."""
    kind = layer.kind
    x = inputs[0]
    if kind == "dense":
        return [lrp_dense(x, layer.weight, layer.bias, relevance)]
    if kind == "conv2d":
        return [lrp_conv(x, layer.weight, layer.bias, relevance, layer.stride, layer.padding)]
    if kind in ("relu", "softmax_head"):
        return [relevance]
    if kind == "maxpool":
        win = int(layer.params["window"])
        return [lrp_maxpool(x, relevance, win, int(layer.params.get("stride", win)))]
    if kind == "avgpool_global":
        return [lrp_global_avgpool(x, relevance)]
    if kind == "add":
        return list(lrp_add(inputs[0], inputs[1], relevance))
    if kind == "flatten":
        return [relevance.reshape(x.shape)]
    if kind == "affine":
        return [lrp_affine(x, layer.params["scale"], layer.params["shift"], relevance)]
    raise SpecError(f"{layer.name}: no relevance rule for kind {kind!r}")


def explain(net: NetworkSpec, image: np.ndarray, target_class: int, seed_mode: str = "logit") -> RelevanceMap:
    """Propagate relevance from output neuron ``target_class`` back to ``image`` (C, H, W)."""
    if not 0 <= target_class < net.classes:
        raise ContractError(f"target_class {target_class} outside 0..{net.classes - 1}")
    if seed_mode not in SEED_MODES:
        raise ContractError(f"seed_mode must be one of {SEED_MODES}")
    image = np.asarray(image, dtype=np.float64)
    logits, trace = forward(net, image[None], trace=True)
    seed = float(logits[0, target_class]) if seed_mode == "logit" else 1.0

    rel = {net.output: np.zeros_like(logits)}
    rel[net.output][0, target_class] = seed
    for layer in reversed(net.layers):
        r = rel[layer.name]
        parts = lrp_rule(layer, [trace[s] for s in layer.inputs], r)
        for src, part in zip(layer.inputs, parts):
            if not np.all(np.isfinite(part)):
                raise NumericError(f"{layer.name}: relevance became non-finite")
            rel[src] = rel[src] + part if src in rel else part
    rin = rel.pop(INPUT)
    return RelevanceMap(
        layers={name: r[0] for name, r in rel.items()},
        input=rin[0],
        target_class=target_class,
        seed_mode=seed_mode,
        seed_value=seed,
    )
