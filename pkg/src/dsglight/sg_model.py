"""The depth-augmented spherical Gaussian lighting model.

A light is N lobes at fixed unit axes sharing one sharpness, each carrying
RGB radiance and optionally a depth coefficient. Evaluation, panorama
reconstruction, depth-driven probe warping, a diffuse irradiance quadrature
for sanity renders, and lossless JSON serialization live here.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .panorama import Panorama, direction_grid, from_array
from .sphere_layout import NodeLayout, place_nodes


def _check_unit(v, name):
    norms = np.linalg.norm(np.asarray(v, dtype=np.float64), axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError(f"{name} must be unit-norm (checked at 1e-6)")


def sg_eval(v, axis, sharpness, amplitude):
    """Single lobe: amplitude * exp(sharpness * (v . axis - 1)) per channel."""
    _check_unit(v, "v")
    _check_unit(axis, "axis")
    if sharpness <= 0.0:
        raise ValueError("sharpness must be positive")
    v = np.asarray(v, dtype=np.float64)
    axis = np.asarray(axis, dtype=np.float64)
    amplitude = np.asarray(amplitude, dtype=np.float64)
    return amplitude * np.exp(sharpness * (v @ axis - 1.0))


@dataclass(frozen=True)
class DsgLight:
    """N-lobe light; ``amplitudes`` is (n, 3) RGB or (n, 4) RGBD."""

    layout: NodeLayout
    amplitudes: np.ndarray
    has_depth: bool
    warped: bool = False
    per_node_lambda: np.ndarray | None = None

    def __post_init__(self):
        amps = np.array(self.amplitudes, dtype=np.float64, order="C")
        want = 4 if self.has_depth else 3
        if amps.shape != (self.layout.n, want):
            raise ValueError(
                f"amplitudes shape {amps.shape}, expected {(self.layout.n, want)}")
        if not np.all(np.isfinite(amps)) or amps.min() < 0.0:
            raise ValueError("amplitudes must be finite and nonnegative")
        object.__setattr__(self, "amplitudes", amps)
        self.amplitudes.setflags(write=False)
        if self.per_node_lambda is not None:
            lam = np.array(self.per_node_lambda, dtype=np.float64)
            if lam.shape != (self.layout.n,) or lam.min() <= 0.0:
                raise ValueError("per_node_lambda must be n positive reals")
            object.__setattr__(self, "per_node_lambda", lam)
            self.per_node_lambda.setflags(write=False)

    @property
    def node_sharpness(self):
        """(n,) sharpness vector, shared or per node for warped probes."""
        if self.per_node_lambda is not None:
            return self.per_node_lambda
        return np.full(self.layout.n, self.layout.sharpness)


def sg_basis(layout, dirs, per_node_lambda=None):
    """Unit-amplitude lobe values exp(lam_i*(d.mu_i - 1)) at directions.

    ``dirs`` is (..., 3); returns (..., n). This matrix is the linear map
    from amplitudes to the mixture and is reused by the fitter and losses.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    lam = per_node_lambda if per_node_lambda is not None else layout.sharpness
    return np.exp(lam * (dirs @ layout.axes.T - 1.0))


def mixture_eval(light, v):
    """Sum of all lobes at direction(s) ``v``, per channel (RGB [+ depth])."""
    _check_unit(v, "v")
    basis = sg_basis(light.layout, v, light.per_node_lambda)
    return basis @ light.amplitudes


def reconstruct_panorama(light, width, height, channel_set="color"):
    """Render the mixture to an equirectangular raster.

    ``channel_set`` selects the RGB radiance columns or the depth column
    (the latter requires a depth-augmented light).
    """
    if width < 2 or height < 2:
        raise ValueError("panorama dimensions must be >= 2")
    if channel_set not in ("color", "depth"):
        raise ValueError(f"unknown channel_set {channel_set!r}")
    if channel_set == "depth" and not light.has_depth:
        raise ValueError("light carries no depth channel")
    dirs = direction_grid(width, height)
    basis = sg_basis(light.layout, dirs, light.per_node_lambda)
    if channel_set == "color":
        px = basis @ light.amplitudes[:, :3]
    else:
        px = (basis @ light.amplitudes[:, 3])[:, :, None]
    return from_array(px)


def warp_probe(light, offset, rescale_sharpness=False):
    """Re-center the light at ``offset`` (meters) using per-node depth.

    Each node's virtual position is depth*axis; the warped node looks along
    position-offset with the remaining distance as its new depth. Radiance
    amplitudes are preserved. With ``rescale_sharpness`` the lobe sharpness
    scales by (new_depth/old_depth)^2, approximating the solid-angle change
    of a fixed-size emitter; the result then carries per-node sharpness.
    """
    if not light.has_depth:
        raise ValueError("warping requires a depth-augmented light")
    depths = light.amplitudes[:, 3]
    if depths.min() <= 0.0:
        raise ValueError("warping requires strictly positive node depths")
    offset = np.asarray(offset, dtype=np.float64)
    if offset.shape != (3,):
        raise ValueError("offset must be a 3-vector")
    if np.linalg.norm(offset) >= depths.min():
        raise ValueError(
            f"offset norm {np.linalg.norm(offset):.6g} outside node shell "
            f"(min depth {depths.min():.6g})")

    positions = depths[:, None] * light.layout.axes
    rel = positions - offset[None, :]
    new_depths = np.linalg.norm(rel, axis=1)
    new_axes = rel / new_depths[:, None]
    new_amps = light.amplitudes.copy()
    new_amps[:, 3] = new_depths

    per_node = None
    if rescale_sharpness:
        base = light.node_sharpness
        per_node = base * (new_depths / depths) ** 2
    layout = NodeLayout(n=light.layout.n, axes=new_axes)
    return DsgLight(layout=layout, amplitudes=new_amps, has_depth=True,
                    warped=True, per_node_lambda=per_node)


def diffuse_irradiance(light, normal, samples):
    """Cosine-weighted sphere quadrature of the RGB mixture.

    Uses a Fibonacci direction set of the given size with the uniform
    weight 4*pi/samples. Depth is geometry, not radiance, so it is excluded.
    """
    _check_unit(normal, "normal")
    if samples < 64:
        raise ValueError("need at least 64 quadrature samples")
    dirs = place_nodes(samples)
    radiance = mixture_eval(light, dirs)[:, :3]
    cosine = np.maximum(dirs @ np.asarray(normal, dtype=np.float64), 0.0)
    return (4.0 * math.pi / samples) * (cosine @ radiance)


def light_to_json(light):
    """Schema: n, lambda, axes, amplitudes, has_depth, warped [, per_node_lambda]."""
    obj = {
        "n": light.layout.n,
        "lambda": light.layout.sharpness,
        "axes": [[float(c) for c in axis] for axis in light.layout.axes],
        "amplitudes": [[float(c) for c in amp] for amp in light.amplitudes],
        "has_depth": light.has_depth,
        "warped": light.warped,
    }
    if light.per_node_lambda is not None:
        obj["per_node_lambda"] = [float(x) for x in light.per_node_lambda]
    return obj


def light_from_json(obj):
    for key in ("n", "lambda", "axes", "amplitudes", "has_depth", "warped"):
        if key not in obj:
            raise ValueError(f"light JSON missing field {key!r}")
    n = int(obj["n"])
    axes = np.asarray(obj["axes"], dtype=np.float64)
    if axes.shape != (n, 3):
        raise ValueError(f"field 'axes' must be {n}x3, got {axes.shape}")
    layout = NodeLayout(n=n, axes=axes)
    if not math.isclose(layout.sharpness, float(obj["lambda"]),
                        rel_tol=1e-12, abs_tol=0.0):
        raise ValueError("field 'lambda' does not match the shared bandwidth")
    amps = np.asarray(obj["amplitudes"], dtype=np.float64)
    has_depth = bool(obj["has_depth"])
    want = 4 if has_depth else 3
    if amps.ndim != 2 or amps.shape != (n, want):
        raise ValueError(f"field 'amplitudes' must be {n}x{want}")
    per_node = None
    if obj.get("per_node_lambda") is not None:
        per_node = np.asarray(obj["per_node_lambda"], dtype=np.float64)
    return DsgLight(layout=layout, amplitudes=amps, has_depth=has_depth,
                    warped=bool(obj["warped"]), per_node_lambda=per_node)


def scale_amplitudes(light, factor):
    """New light with all amplitudes scaled; handy for linearity checks."""
    if factor < 0.0:
        raise ValueError("scale factor must be nonnegative")
    return replace(light, amplitudes=light.amplitudes * factor)
