"""Predictor assembly: conv backbone, two bridge FCs, four graph layers.

The backbone turns a 240x360 LDR crop into per-node features; the graph
stack exchanges information between neighboring lobes and regresses one
nonnegative amplitude vector per node (softplus head).
"""

import base64
import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .._util import atomic_write_bytes, make_rng
from ..sphere_layout import build_layout, graph_spec_hash, knn_adjacency
from .layers import (conv2d_backward, conv2d_forward, fc_backward, fc_forward,
                     gcn_layer_backward, gcn_layer_forward, relu_backward,
                     relu_forward, softplus_backward, softplus_forward,
                     xavier_uniform)

CHECKPOINT_FORMAT = "dsglight-checkpoint-v1"


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale architecture knobs (graph size comes from the GraphSpec)."""

    input_height: int = 240
    input_width: int = 360
    conv_channels: tuple = (8, 16, 32, 32)
    kernel: int = 3
    stride: int = 2
    fc_hidden: int = 256
    node_features: int = 32
    gcn_widths: tuple = (64, 64, 32)
    out_channels: int = 4  # RGBD; 3 for RGB-only training

    def conv_output_hw(self):
        h, w = self.input_height, self.input_width
        for _ in self.conv_channels:
            h = -(-h // self.stride)
            w = -(-w // self.stride)
        return h, w

    def flat_features(self):
        h, w = self.conv_output_hw()
        return h * w * self.conv_channels[-1]


class PredictorModel:
    """Parameter container plus the graph it predicts over."""

    def __init__(self, graph, config, params, rng_seed):
        self.graph = graph
        self.config = config
        self.params = params
        self.rng_seed = rng_seed

    def param_names(self):
        return list(self.params.keys())


def parameter_shapes(config, n_nodes):
    """Ordered {name: (shape, fan_in, fan_out)} for initialization."""
    k = config.kernel
    shapes = {}
    cin = 3
    for i, cout in enumerate(config.conv_channels, start=1):
        shapes[f"conv{i}_w"] = ((k, k, cin, cout), k * k * cin, k * k * cout)
        shapes[f"conv{i}_b"] = ((cout,), None, None)
        cin = cout
    flat = config.flat_features()
    shapes["fc1_w"] = ((flat, config.fc_hidden), flat, config.fc_hidden)
    shapes["fc1_b"] = ((config.fc_hidden,), None, None)
    bridge_out = n_nodes * config.node_features
    shapes["fc2_w"] = ((config.fc_hidden, bridge_out), config.fc_hidden, bridge_out)
    shapes["fc2_b"] = ((bridge_out,), None, None)
    widths = (config.node_features,) + tuple(config.gcn_widths) + (config.out_channels,)
    for layer, (fin, fout) in enumerate(zip(widths[:-1], widths[1:])):
        shapes[f"gcn{layer}_w"] = ((fin, fout), fin, fout)
    return shapes


def init_model(graph, config=None, seed=0):
    """Xavier-uniform weights, zero biases, drawn from the seed's init stream."""
    config = config or ModelConfig()
    rng = make_rng(seed, "init")
    params = {}
    for name, (shape, fan_in, fan_out) in parameter_shapes(config, graph.layout.n).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = xavier_uniform(rng, shape, fan_in, fan_out)
    return PredictorModel(graph=graph, config=config, params=params, rng_seed=seed)


def _check_images(imgs, config):
    want = (config.input_height, config.input_width, 3)
    if imgs.ndim == 3:
        imgs = imgs[None]
    if imgs.ndim != 4 or imgs.shape[1:] != want:
        raise ValueError(f"expected image(s) of shape {want}, got {imgs.shape}")
    return np.asarray(imgs, dtype=np.float64)


def backbone_forward(model, imgs):
    """Images (B, H, W, 3) -> node features (B, N, F0) plus backward cache."""
    x = _check_images(imgs, model.config)
    batch = x.shape[0]
    p = model.params
    caches = []
    for i in range(1, len(model.config.conv_channels) + 1):
        x, cache = conv2d_forward(x, p[f"conv{i}_w"], p[f"conv{i}_b"],
                                  stride=model.config.stride)
        caches.append(("conv", i, cache, x))
        x = relu_forward(x)
    flat = x.reshape(batch, -1)
    z1 = fc_forward(flat, p["fc1_w"], p["fc1_b"])
    a1 = relu_forward(z1)
    z2 = fc_forward(a1, p["fc2_w"], p["fc2_b"])
    a2 = relu_forward(z2)
    n = model.graph.layout.n
    feats = a2.reshape(batch, n, model.config.node_features)
    cache = {"conv": caches, "flat": flat, "z1": z1, "a1": a1, "z2": z2,
             "batch": batch}
    return feats, cache


def backbone_backward(model, cache, dfeats):
    """Gradients of the backbone; input-image gradient is not materialized."""
    p = model.params
    grads = {}
    batch = cache["batch"]
    da2 = dfeats.reshape(batch, -1)
    dz2 = relu_backward(da2, cache["z2"])
    da1, grads["fc2_w"], grads["fc2_b"] = fc_backward(dz2, cache["a1"], p["fc2_w"])
    dz1 = relu_backward(da1, cache["z1"])
    dflat, grads["fc1_w"], grads["fc1_b"] = fc_backward(dz1, cache["flat"], p["fc1_w"])

    conv_caches = cache["conv"]
    dx = dflat.reshape(conv_caches[-1][3].shape)
    for pos, (_, i, conv_cache, pre) in enumerate(reversed(conv_caches)):
        dpre = relu_backward(dx, pre)
        need_dx = pos < len(conv_caches) - 1
        dx, grads[f"conv{i}_w"], grads[f"conv{i}_b"] = conv2d_backward(
            dpre, conv_cache, need_dx=need_dx)
    return grads


def gcn_stack_forward(model, feats):
    """Node features (N, F0) -> pre-head output (N, out_channels) + caches."""
    e_norm = model.graph.normalized
    n_layers = len(model.config.gcn_widths) + 1
    h = feats
    caches = []
    for layer in range(n_layers):
        act = "relu" if layer < n_layers - 1 else "linear"
        h, cache = gcn_layer_forward(h, e_norm, model.params[f"gcn{layer}_w"], act)
        caches.append(cache)
    return h, caches


def gcn_stack_backward(model, caches, dout):
    grads = {}
    dh = dout
    for layer in reversed(range(len(caches))):
        dh, grads[f"gcn{layer}_w"] = gcn_layer_backward(dh, caches[layer])
    return dh, grads


def model_forward(model, img, want_cache=False):
    """Predict per-node amplitudes (N, out_channels) for one image.

    Softplus on the head keeps predicted amplitudes strictly positive so
    reconstructed maps are valid radiance.
    """
    feats, bcache = backbone_forward(model, img)
    head_pre, gcaches = gcn_stack_forward(model, feats[0])
    amps = softplus_forward(head_pre)
    if not want_cache:
        return amps
    return amps, {"bcache": bcache, "gcaches": gcaches, "head_pre": head_pre}


def model_backward(model, cache, damps):
    """Parameter gradients of a scalar loss given d(loss)/d(amplitudes)."""
    dhead = softplus_backward(damps, cache["head_pre"])
    dfeats, grads = gcn_stack_backward(model, cache["gcaches"], dhead)
    grads.update(backbone_backward(model, cache["bcache"], dfeats[None]))
    return grads


# ---------------------------------------------------------------------------
# Checkpointing (single JSON; tensors as base64 little-endian float64)
# ---------------------------------------------------------------------------

def _encode_array(arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape),
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode_array(obj):
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).copy()


def save_checkpoint(model, path, extra=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "n": model.graph.layout.n,
        "k": model.graph.k,
        "graph_hash": graph_spec_hash(model.graph),
        "seed": model.rng_seed,
        "params": {name: _encode_array(arr) for name, arr in model.params.items()},
    }
    if extra:
        payload["extra"] = extra
    atomic_write_bytes(path, json.dumps(payload).encode("ascii"))


def load_checkpoint(path):
    """Rebuild the model; refuses a checkpoint whose graph hash mismatches."""
    with open(path, "rb") as fh:
        payload = json.loads(fh.read())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} file")
    cfg = payload["config"]
    cfg["conv_channels"] = tuple(cfg["conv_channels"])
    cfg["gcn_widths"] = tuple(cfg["gcn_widths"])
    config = ModelConfig(**cfg)
    graph = knn_adjacency(build_layout(payload["n"]), payload["k"])
    if graph_spec_hash(graph) != payload["graph_hash"]:
        raise ValueError("checkpoint graph hash does not match the rebuilt graph")
    params = {name: _decode_array(obj) for name, obj in payload["params"].items()}
    return PredictorModel(graph=graph, config=config, params=params,
                          rng_seed=payload["seed"])


def checkpoint_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
