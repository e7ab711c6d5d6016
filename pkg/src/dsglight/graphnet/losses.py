"""Hybrid training loss: weighted amplitude L2, render loss, perceptual term.

Color amplitudes train with L = L_W + alpha*L_R + beta*L_perc; depth trains
with a plain L2 added on top. Every term also exposes its gradient with
respect to the predicted amplitudes (the render is linear in them, so the
pixel losses pull back through one basis-matrix transpose).
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from .._util import make_rng
from ..panorama import aces_weight, direction_grid
from ..sg_model import sg_basis
from .layers import conv2d_backward, conv2d_forward, relu_backward, \
    relu_forward, xavier_uniform

DEFAULT_LOSS_RES = (64, 128)  # (height, width) of the render used in losses

_BASIS_CACHE = {}


def render_basis(layout, height, width):
    """(H*W, N) unit-amplitude lobe matrix at the loss resolution, cached."""
    key = (hashlib.sha1(layout.axes.tobytes()).hexdigest(), height, width)
    if key not in _BASIS_CACHE:
        dirs = direction_grid(width, height)
        _BASIS_CACHE[key] = sg_basis(layout, dirs).reshape(-1, layout.n)
    return _BASIS_CACHE[key]


def loss_weighted_l2(pred, truth):
    """Mean of f_w(truth) * (pred - truth)^2 over all entries."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean(aces_weight(truth) * (pred - truth) ** 2))


def loss_weighted_l2_grad(pred, truth):
    return 2.0 * aces_weight(truth) * (pred - truth) / pred.size


def loss_reconstruction(pred_amps, truth_amps, layout, res=DEFAULT_LOSS_RES):
    """Mean squared pixel difference of the two RGB mixture renders."""
    basis = render_basis(layout, *res)
    diff = basis @ (np.asarray(pred_amps)[:, :3] - np.asarray(truth_amps)[:, :3])
    return float(np.mean(diff ** 2))


def loss_perceptual(pred_map, truth_map, extractor):
    """Sum of squared feature differences over the feature element count."""
    pred_map = np.asarray(pred_map, dtype=np.float64)
    truth_map = np.asarray(truth_map, dtype=np.float64)
    if pred_map.shape != truth_map.shape:
        raise ValueError(f"shape mismatch {pred_map.shape} vs {truth_map.shape}")
    fp, _ = extractor.forward(pred_map)
    ft, _ = extractor.forward(truth_map)
    return float(np.sum((fp - ft) ** 2) / fp.size)


def loss_total(weighted, reconstruction, perceptual, alpha, beta, depth=0.0):
    """L = L_W + alpha*L_R + beta*L_perc, plus the separate depth L2."""
    return weighted + alpha * reconstruction + beta * perceptual + depth


class IdentityExtractor:
    """Degenerate feature map; reduces the perceptual term to pixel MSE."""

    name = "identity"

    def forward(self, img):
        return img, None

    def backward(self, dfeat, cache):
        return dfeat

    def relu_masks(self, cache):
        return []


class RandomConvExtractor:
    """Seeded, fixed (untrained) conv stack standing in for a pretrained net.

    Three stride-2 convolutions with ReLU between them; the last stage is
    linear and its output is the feature space of the perceptual loss. The
    weights are frozen at construction, so the loss stays deterministic.
    """

    name = "random-conv"

    def __init__(self, seed=0, channels=(8, 16, 16), kernel=3):
        rng = make_rng(seed, "extractor")
        self.seed = seed
        self.weights = []
        self.biases = []
        cin = 3
        for cout in channels:
            fan_in = kernel * kernel * cin
            fan_out = kernel * kernel * cout
            w = xavier_uniform(rng, (kernel, kernel, cin, cout), fan_in, fan_out)
            self.weights.append(w)
            self.biases.append(np.zeros(cout))
            cin = cout

    def forward(self, img):
        x = np.asarray(img, dtype=np.float64)[None]
        caches = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x, conv_cache = conv2d_forward(x, w, b, stride=2)
            caches.append((conv_cache, x))
            if i < last:
                x = relu_forward(x)
        return x[0], caches

    def backward(self, dfeat, caches):
        dx = np.asarray(dfeat)[None]
        last = len(self.weights) - 1
        for i in reversed(range(len(self.weights))):
            conv_cache, pre = caches[i]
            if i < last:
                dx = relu_backward(dx, pre)
            dx, _, _ = conv2d_backward(dx, conv_cache, need_dx=True)
        return dx[0]

    def relu_masks(self, cache):
        return [pre > 0.0 for _, pre in cache[:-1]]


@dataclass
class _TruthBundle:
    render: np.ndarray     # (h, w, 3)
    features: np.ndarray   # extractor output on the render


class LossContext:
    """Precomputed pieces shared by every loss evaluation during training."""

    def __init__(self, layout, res=DEFAULT_LOSS_RES, extractor=None,
                 alpha=0.2, beta=0.1):
        self.layout = layout
        self.res = res
        self.basis = render_basis(layout, *res)
        self.extractor = extractor if extractor is not None else RandomConvExtractor()
        self.alpha = alpha
        self.beta = beta
        self._truth_cache = {}

    def render_rgb(self, amps):
        h, w = self.res
        return (self.basis @ np.asarray(amps)[:, :3]).reshape(h, w, 3)

    def truth_bundle(self, truth_amps):
        # keyed by identity; the stored reference keeps the id stable
        key = id(truth_amps)
        if key not in self._truth_cache:
            render = self.render_rgb(truth_amps)
            feats, _ = self.extractor.forward(render)
            self._truth_cache[key] = (truth_amps,
                                      _TruthBundle(render=render, features=feats))
        return self._truth_cache[key][1]

    def loss_and_amp_grad(self, pred_amps, truth_amps):
        """Total loss, its components, and d(total)/d(pred_amps)."""
        pred_amps = np.asarray(pred_amps, dtype=np.float64)
        truth_amps = np.asarray(truth_amps, dtype=np.float64)
        with_depth = pred_amps.shape[1] == 4
        pred_rgb = pred_amps[:, :3]
        truth_rgb = truth_amps[:, :3]
        bundle = self.truth_bundle(truth_amps)
        h, w = self.res

        l_w = loss_weighted_l2(pred_rgb, truth_rgb)
        damps = np.zeros_like(pred_amps)
        damps[:, :3] = loss_weighted_l2_grad(pred_rgb, truth_rgb)

        pred_map = self.render_rgb(pred_amps)
        pix_diff = pred_map - bundle.render
        l_r = float(np.mean(pix_diff ** 2))
        dmap = self.alpha * (2.0 * pix_diff / pix_diff.size)

        feats, fcache = self.extractor.forward(pred_map)
        feat_diff = feats - bundle.features
        l_p = float(np.sum(feat_diff ** 2) / feats.size)
        dmap = dmap + self.beta * self.extractor.backward(
            2.0 * feat_diff / feats.size, fcache)
        damps[:, :3] += self.basis.T @ dmap.reshape(h * w, 3)

        l_d = 0.0
        if with_depth:
            ddiff = pred_amps[:, 3] - truth_amps[:, 3]
            l_d = float(np.mean(ddiff ** 2))
            damps[:, 3] = 2.0 * ddiff / ddiff.size

        total = loss_total(l_w, l_r, l_p, self.alpha, self.beta, l_d)
        components = {"weighted_l2": l_w, "reconstruction": l_r,
                      "perceptual": l_p, "depth_l2": l_d}
        return total, components, damps
