"""Ground-truth light generation: nonnegative least squares over the lobe basis.

The mixture is linear in the amplitudes, so fitting a panorama reduces to
per-channel NNLS. Everything is accumulated into the normal equations once
(the basis has only N columns) and solved with a Lawson-Hanson active set.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .panorama import bilinear_sample, direction_grid, from_array, psnr
from .sg_model import DsgLight, reconstruct_panorama, sg_basis

DEFAULT_FIT_WIDTH = 256
DEFAULT_FIT_HEIGHT = 128


class NnlsError(RuntimeError):
    """Active-set iteration cap hit; carries the best iterate found."""

    def __init__(self, message, best_x, residual):
        super().__init__(message)
        self.best_x = best_x
        self.residual = residual


@dataclass
class NormalSystem:
    """Per-channel normal equations of the amplitude fit.

    gram = B^T W B over pixels, rhs[c] = B^T W p_c, btb[c] = sum w p_c^2,
    where B holds unit-amplitude lobe values at every pixel direction.
    """

    gram: np.ndarray            # (n, n)
    rhs: np.ndarray             # (channels, n)
    btb: np.ndarray             # (channels,)
    pixel_count: int
    weighting: str = "none"
    warnings: list = field(default_factory=list)


def _solid_angle_weights(width, height):
    # sin(theta) at each row's pixel centers
    theta = math.pi * (np.arange(height) + 0.5) / height
    return np.sin(theta)


def build_normal_system(layout, pano, weighting="none"):
    """Accumulate gram/rhs for ``pano`` over ``layout``'s lobe basis.

    ``weighting`` is "none" (plain pixel sum) or "solid_angle" (rows scaled
    by sin(theta) to undo equirectangular pole oversampling).
    """
    if weighting not in ("none", "solid_angle"):
        raise ValueError(f"unknown weighting {weighting!r}")
    if pano.width < 16 or pano.height < 8:
        raise ValueError("panorama too small to condition the fit (min 16x8)")

    warnings = []
    dots = layout.axes @ layout.axes.T
    np.fill_diagonal(dots, -2.0)
    if dots.max() > 1.0 - 1e-12:
        warnings.append("duplicate axes: normal system is singular")

    dirs = direction_grid(pano.width, pano.height)
    basis = sg_basis(layout, dirs).reshape(-1, layout.n)
    pixels = pano.pixels.reshape(-1, pano.channels)
    if weighting == "solid_angle":
        w = np.repeat(_solid_angle_weights(pano.width, pano.height), pano.width)
        weighted = basis * w[:, None]
        gram = weighted.T @ basis
        rhs = (weighted.T @ pixels).T
        btb = w @ (pixels ** 2)
    else:
        gram = basis.T @ basis
        rhs = (basis.T @ pixels).T
        btb = (pixels ** 2).sum(axis=0)
    gram = 0.5 * (gram + gram.T)
    return NormalSystem(gram=gram, rhs=rhs, btb=np.atleast_1d(btb),
                        pixel_count=pano.width * pano.height,
                        weighting=weighting, warnings=warnings)


def nnls_solve(system, channel, max_iter=None):
    """Lawson-Hanson active-set NNLS on the normal equations.

    Returns (x, iterations). x >= 0 minimizes the quadratic; at return the
    KKT conditions hold: near-zero gradient on the active set, nonnegative
    gradient on the bound set.
    """
    gram = system.gram
    rhs = system.rhs[channel]
    n = gram.shape[0]
    if max_iter is None:
        max_iter = 10 * n

    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = rhs.copy()  # negative gradient at x=0
    tol = 1e-10 * max(np.linalg.norm(rhs), 1.0)
    iterations = 0

    def solve_passive():
        idx = np.flatnonzero(passive)
        sub = gram[np.ix_(idx, idx)]
        try:
            s = np.linalg.solve(sub, rhs[idx])
        except np.linalg.LinAlgError:
            s = np.linalg.lstsq(sub, rhs[idx], rcond=None)[0]
        return idx, s

    while True:
        w = rhs - gram @ x
        candidates = ~passive
        if not np.any(candidates) or np.max(w[candidates]) <= tol:
            break
        if iterations >= max_iter:
            residual = float(x @ gram @ x - 2.0 * x @ rhs + system.btb[channel])
            raise NnlsError(
                f"no convergence after {max_iter} active-set iterations",
                best_x=x, residual=math.sqrt(max(residual, 0.0)))
        iterations += 1
        # most violating bound coordinate enters the passive set
        masked = np.where(candidates, w, -np.inf)
        passive[int(np.argmax(masked))] = True

        idx, s = solve_passive()
        while np.min(s) <= 0.0:
            iterations += 1
            if iterations > max_iter:
                residual = float(x @ gram @ x - 2.0 * x @ rhs + system.btb[channel])
                raise NnlsError(
                    f"no convergence after {max_iter} active-set iterations",
                    best_x=x, residual=math.sqrt(max(residual, 0.0)))
            blocking = s <= 0.0
            denom = x[idx][blocking] - s[blocking]
            ratios = np.where(denom > 0.0, x[idx][blocking] / np.where(
                denom > 0.0, denom, 1.0), 0.0)
            alpha = np.min(ratios)
            x[idx] += alpha * (s - x[idx])
            passive[idx] = x[idx] > 1e-14
            x[~passive] = 0.0
            idx, s = solve_passive()
        x[:] = 0.0
        x[idx] = s

    return x, iterations


@dataclass
class FitReport:
    residual_l2: float
    psnr_reconstruction: float
    iterations_per_channel: list
    weighting: str
    warnings: list = field(default_factory=list)

    def to_json(self):
        return {
            "residual_l2": self.residual_l2,
            "psnr_reconstruction": self.psnr_reconstruction,
            "iterations_per_channel": self.iterations_per_channel,
            "weighting": self.weighting,
            "warnings": self.warnings,
        }


def box_downsample(pano, width, height):
    """Area-average to (width, height); exact for integer factors."""
    if pano.width % width == 0 and pano.height % height == 0:
        fx, fy = pano.width // width, pano.height // height
        px = pano.pixels.reshape(height, fy, width, fx, pano.channels)
        return from_array(px.mean(axis=(1, 3)))
    # fall back to bilinear at target pixel centers
    xs = (np.arange(width) + 0.5) * pano.width / width - 0.5
    ys = (np.arange(height) + 0.5) * pano.height / height - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return from_array(bilinear_sample(pano, gx, gy))


def fit_light(pano, depth=None, layout=None, weighting="none",
              fit_width=DEFAULT_FIT_WIDTH, fit_height=DEFAULT_FIT_HEIGHT):
    """Fit per-channel nonnegative amplitudes to an HDR panorama.

    ``depth``, when given, is a 1-channel panorama of the same dimensions
    fitted over the same basis into the fourth amplitude column. Inputs
    larger than the fitting resolution are box-downsampled first.
    """
    if layout is None:
        raise ValueError("a node layout is required")
    if pano.channels != 3:
        raise ValueError("radiance panorama must have 3 channels")
    if depth is not None:
        if depth.channels != 1:
            raise ValueError("depth panorama must have 1 channel")
        if (depth.width, depth.height) != (pano.width, pano.height):
            raise ValueError("depth dimensions must match the radiance panorama")

    if pano.width > fit_width or pano.height > fit_height:
        pano = box_downsample(pano, fit_width, fit_height)
        if depth is not None:
            depth = box_downsample(depth, fit_width, fit_height)

    system = build_normal_system(layout, pano, weighting)
    n = layout.n
    channels = 4 if depth is not None else 3
    amps = np.zeros((n, channels))
    iterations = []
    for c in range(3):
        amps[:, c], its = nnls_solve(system, c)
        iterations.append(its)
    if depth is not None:
        dsys = build_normal_system(layout, depth, weighting)
        amps[:, 3], its = nnls_solve(dsys, 0)
        iterations.append(its)

    light = DsgLight(layout=layout, amplitudes=amps, has_depth=depth is not None)
    recon = reconstruct_panorama(light, pano.width, pano.height)
    residual = float(np.linalg.norm(recon.pixels - pano.pixels))
    psnr_db = psnr(recon, pano) if pano.pixels.max() > 0.0 else None
    report = FitReport(residual_l2=residual, psnr_reconstruction=psnr_db,
                       iterations_per_channel=iterations, weighting=weighting,
                       warnings=list(system.warnings))
    return light, report
