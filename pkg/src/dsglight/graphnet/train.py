"""Training loop (Adam, halving schedule), gradient checking, synthetic data."""

from dataclasses import dataclass, field

import numpy as np

from .._util import make_rng
from ..panorama import from_array, psnr, sample_crop, sample_crop_specs, \
    tonemap_ldr
from ..sg_model import DsgLight, reconstruct_panorama
from .losses import LossContext, RandomConvExtractor
from .model import ModelConfig, init_model, model_backward, model_forward


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 5
    halve_every_epochs: int = 40
    epochs: int = 150
    alpha: float = 0.2
    beta: float = 0.1
    seed: int = 0
    target_psnr: float | None = None  # early stop once training PSNR reaches it
    psnr_check_every: int = 10

    def __post_init__(self):
        for name in ("learning_rate", "adam_beta1", "adam_beta2", "batch_size",
                     "halve_every_epochs", "epochs", "alpha", "beta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Sample:
    """One training pair: LDR crop and its ground-truth node amplitudes."""

    image: np.ndarray       # (H, W, 3) in [0, 1]
    amplitudes: np.ndarray  # (N, 3|4)
    meta: dict = field(default_factory=dict)


class AdamState:
    def __init__(self, params):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(params, grads, state, lr, config):
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / bias1) / (np.sqrt(v / bias2) + config.adam_eps)


def sample_loss_and_grads(model, sample, ctx):
    """Full forward + manual backward for one sample."""
    amps, cache = model_forward(model, sample.image, want_cache=True)
    total, components, damps = ctx.loss_and_amp_grad(amps, sample.amplitudes)
    grads = model_backward(model, cache, damps)
    return total, components, grads


def training_psnr(model, dataset, ctx):
    """Mean PSNR between predicted and ground-truth renders at the loss res."""
    values = []
    for sample in dataset:
        pred = model_forward(model, sample.image)
        pred_map = from_array(ctx.render_rgb(pred))
        truth_map = from_array(ctx.truth_bundle(sample.amplitudes).render)
        values.append(psnr(pred_map, truth_map))
    return float(np.mean(values))


def train(dataset, graph, config, model_config=None, extractor=None):
    """Train a fresh predictor on ``dataset``; returns (model, history).

    Deterministic given the config seed: initialization, shuffling, and the
    perceptual extractor all draw from distinct substreams of that seed.
    History holds one record per completed epoch (loss, lr, optional psnr).
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    out_channels = dataset[0].amplitudes.shape[1]
    if model_config is None:
        model_config = ModelConfig(out_channels=out_channels)
    if model_config.out_channels != out_channels:
        raise ValueError("model out_channels does not match dataset amplitudes")
    for s in dataset:
        if s.amplitudes.shape != (graph.layout.n, out_channels):
            raise ValueError("inconsistent amplitude shapes in dataset")

    model = init_model(graph, model_config, seed=config.seed)
    if extractor is None:
        extractor = RandomConvExtractor(seed=config.seed)
    ctx = LossContext(graph.layout, extractor=extractor,
                      alpha=config.alpha, beta=config.beta)
    state = AdamState(model.params)
    rng = make_rng(config.seed, "train")

    history = []
    for epoch in range(config.epochs):
        lr = config.learning_rate * 0.5 ** (epoch // config.halve_every_epochs)
        order = rng.permutation(len(dataset))
        loss_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            grads = None
            for idx in batch:
                total, _, g = sample_loss_and_grads(model, dataset[idx], ctx)
                loss_sum += total
                if grads is None:
                    grads = g
                else:
                    for name in grads:
                        grads[name] += g[name]
            for name in grads:
                grads[name] /= len(batch)
            adam_step(model.params, grads, state, lr, config)

        record = {"epoch": epoch, "loss": loss_sum / len(dataset), "lr": lr}
        check_now = config.target_psnr is not None and (
            (epoch + 1) % config.psnr_check_every == 0
            or epoch == config.epochs - 1)
        if check_now:
            record["psnr"] = training_psnr(model, dataset, ctx)
        history.append(record)
        if not np.isfinite(record["loss"]):
            raise FloatingPointError(f"loss diverged at epoch {epoch}")
        if check_now and record["psnr"] >= config.target_psnr:
            break
    return model, history


def _relu_mask_fingerprint(model, sample, ctx):
    """Loss value plus the sign pattern of every ReLU input it crossed.

    Central differences are only valid when no ReLU flips inside the
    perturbation window; comparing fingerprints of the two endpoint
    evaluations detects contaminated windows.
    """
    amps, cache = model_forward(model, sample.image, want_cache=True)
    total, _, _ = ctx.loss_and_amp_grad(amps, sample.amplitudes)
    masks = [pre > 0.0 for _, _, _, pre in cache["bcache"]["conv"]]
    masks.append(cache["bcache"]["z1"] > 0.0)
    masks.append(cache["bcache"]["z2"] > 0.0)
    for gcache in cache["gcaches"]:
        if gcache[5] == "relu":
            masks.append(gcache[4] > 0.0)
    _, fcache = ctx.extractor.forward(ctx.render_rgb(amps))
    masks.extend(ctx.extractor.relu_masks(fcache))
    return total, masks


def _masks_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(model, sample, epsilon=1e-4, coords_per_group=50, seed=0,
               ctx=None):
    """Max relative error between analytic and central-difference gradients.

    Samples ``coords_per_group`` coordinates per parameter tensor. Relative
    error uses |a - n| / max(|a| + |n|, 1e-8). A finite difference across a
    ReLU kink measures a secant, not the derivative, so each window is
    checked for ReLU sign flips and epsilon shrinks (down to 1e-7) until
    the window is smooth; coordinates that stay contaminated are swapped
    for fresh draws when the tensor has spares.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    if ctx is None:
        ctx = LossContext(model.graph.layout,
                          extractor=RandomConvExtractor(seed=model.rng_seed))
    _, _, analytic = sample_loss_and_grads(model, sample, ctx)

    ladder = [epsilon]
    while ladder[-1] > 1.05e-7:
        ladder.append(ladder[-1] / 10.0)

    rng = make_rng(seed, 0)
    worst = 0.0
    for name, param in model.params.items():
        flat = param.reshape(-1)
        size = flat.size
        count = min(coords_per_group, size)
        order = rng.permutation(size)
        checked = 0
        cursor = 0
        fallback = None  # (coordinate, numeric from the smallest epsilon)
        while checked < count and cursor < size:
            c = order[cursor]
            cursor += 1
            numeric = None
            for eps in ladder:
                keep = flat[c]
                flat[c] = keep + eps
                up, up_masks = _relu_mask_fingerprint(model, sample, ctx)
                flat[c] = keep - eps
                down, down_masks = _relu_mask_fingerprint(model, sample, ctx)
                flat[c] = keep
                estimate = (up - down) / (2.0 * eps)
                if _masks_equal(up_masks, down_masks):
                    numeric = estimate
                    break
                fallback = (c, estimate)
            if numeric is None:
                continue  # kink-contaminated at every scale; try a spare
            a = analytic[name].reshape(-1)[c]
            worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), 1e-8))
            checked += 1
        if checked < count and fallback is not None:
            c, numeric = fallback
            a = analytic[name].reshape(-1)[c]
            worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), 1e-8))
    return worst


def synthetic_overfit_dataset(graph, count, seed, out_channels=4):
    """Memorization fixtures: random sparse lights rendered, cropped, tonemapped.

    Each sample's ground truth is the generating amplitude set itself, so a
    network that memorizes the mapping can reach arbitrarily low loss.
    """
    rng = make_rng(seed, "synthetic")
    layout = graph.layout
    n = layout.n
    samples = []
    for index in range(count):
        amps = np.zeros((n, out_channels))
        amps[:, :3] = rng.uniform(0.02, 0.15, size=(n, 3))
        for _ in range(int(rng.integers(2, 5))):
            node = int(rng.integers(0, n))
            amps[node, :3] = rng.uniform(1.0, 3.0, size=3)
        if out_channels == 4:
            amps[:, 3] = rng.uniform(0.5, 2.0, size=n)
        light = DsgLight(layout=layout, amplitudes=amps,
                         has_depth=out_channels == 4)
        pano = reconstruct_panorama(light, 256, 128)
        spec = sample_crop_specs(rng, 1)[0]
        crop = sample_crop(pano, spec)
        ldr = tonemap_ldr(crop)
        samples.append(Sample(image=ldr.pixels, amplitudes=amps,
                              meta={"spec": spec, "index": index}))
    return samples
