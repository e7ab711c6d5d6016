"""Equirectangular raster handling.

Covers the pixel/direction mapping shared by fitting and reconstruction,
the PSNR metric, the filmic rational weight curve, LDR conversion, the
FoV-limited perspective crop sampler, and Radiance HDR / PFM file I/O.

Convention (fixed for the whole package): the center column looks down -Z,
+Y is up. With u = (x+0.5)/W, t = (y+0.5)/H, phi = 2*pi*u - pi, theta = pi*t:

    dir = (sin(theta)*sin(phi), cos(theta), -sin(theta)*cos(phi))
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from ._util import atomic_write_bytes


class PanoramaFormatError(ValueError):
    """Malformed or truncated image file; ``offset`` is the failing byte."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Panorama:
    """Linear radiance (3-channel) or depth (1-channel) raster."""

    width: int
    height: int
    channels: int
    pixels: np.ndarray  # (height, width, channels) float64, finite, >= 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("panorama dimensions must be positive")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        px = np.array(self.pixels, dtype=np.float64, order="C")
        if px.shape != (self.height, self.width, self.channels):
            raise ValueError(
                f"pixel shape {px.shape} does not match "
                f"{(self.height, self.width, self.channels)}")
        if not np.all(np.isfinite(px)):
            raise ValueError("pixel values must be finite")
        if px.min() < 0.0:
            raise ValueError("pixel values must be nonnegative")
        object.__setattr__(self, "pixels", px)
        self.pixels.setflags(write=False)


def from_array(pixels):
    """Wrap an (H, W, C) or (H, W) array as a Panorama."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 2:
        px = px[:, :, None]
    h, w, c = px.shape
    return Panorama(width=w, height=h, channels=c, pixels=px)


# ---------------------------------------------------------------------------
# Pixel <-> direction mapping
# ---------------------------------------------------------------------------

def pixel_to_direction(x, y, width, height):
    """Unit view direction at the center of pixel (x, y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(x < 0) or np.any(x >= width) or np.any(y < 0) or np.any(y >= height):
        raise ValueError("pixel indices out of range")
    phi = 2.0 * math.pi * (x + 0.5) / width - math.pi
    theta = math.pi * (y + 0.5) / height
    sin_t = np.sin(theta)
    return np.stack(np.broadcast_arrays(
        sin_t * np.sin(phi), np.cos(theta), -sin_t * np.cos(phi)), axis=-1)


def direction_to_pixel(v, width, height):
    """Fractional pixel coordinates of unit direction(s); phi wraps to [-pi, pi)."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("directions must be unit vectors")
    theta = np.arccos(np.clip(v[..., 1], -1.0, 1.0))
    phi = np.arctan2(v[..., 0], -v[..., 2])
    phi = np.where(phi >= math.pi, phi - 2.0 * math.pi, phi)
    x = (phi + math.pi) / (2.0 * math.pi) * width - 0.5
    y = theta / math.pi * height - 0.5
    return np.stack([x, y], axis=-1)


def direction_grid(width, height):
    """(H, W, 3) unit directions at every pixel center."""
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    return pixel_to_direction(xs[None, :], ys[:, None], width, height)


# ---------------------------------------------------------------------------
# Metrics and tone mapping
# ---------------------------------------------------------------------------

PSNR_CAP_DB = 99.0


def psnr(test, reference):
    """10*log10(peak^2 / MSE) against the reference's peak, capped at 99 dB."""
    if (test.width, test.height, test.channels) != (
            reference.width, reference.height, reference.channels):
        raise ValueError("panorama dimensions/channels must match")
    peak = float(reference.pixels.max())
    if peak <= 0.0:
        raise ValueError("reference must not be all-zero")
    mse = float(np.mean((test.pixels - reference.pixels) ** 2))
    if mse < peak * peak * 10.0 ** (-9.9):
        return PSNR_CAP_DB
    return 10.0 * math.log10(peak * peak / mse)


def aces_weight(x):
    """Filmic rational curve used to reweight HDR values.

    f(x) = x(2.51x + 0.03) / (x(2.43x + 0.59) + 0.14); monotone on [0, inf)
    and bounded by 2.51/2.43.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0.0):
        raise ValueError("weight curve is defined for nonnegative inputs")
    return x * (2.51 * x + 0.03) / (x * (2.43 * x + 0.59) + 0.14)


LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])


def luminance(pano):
    if pano.channels == 1:
        return pano.pixels[:, :, 0]
    return pano.pixels @ LUMA_WEIGHTS


def tonemap_ldr(pano):
    """Linear HDR -> display LDR in [0, 1].

    Exposure-normalizes by the 90th-percentile luminance (robust to a few
    saturated source pixels), clips, then applies gamma 1/2.2.
    """
    lum = luminance(pano)
    p90 = float(np.percentile(lum, 90.0))
    scaled = pano.pixels / p90 if p90 > 0.0 else pano.pixels
    ldr = np.clip(scaled, 0.0, 1.0) ** (1.0 / 2.2)
    return from_array(ldr)


# ---------------------------------------------------------------------------
# Perspective crop sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CropSpec:
    """Pinhole view parameters drawn for dataset generation."""

    elevation: float            # degrees in [-20, 20]
    azimuth: float              # degrees in [-180, 180]
    fov_h: float                # horizontal FoV, degrees in [60, 80]
    out_width: int = 360
    out_height: int = 240

    def __post_init__(self):
        if not -20.0 <= self.elevation <= 20.0:
            raise ValueError(f"elevation {self.elevation} outside [-20, 20]")
        if not -180.0 <= self.azimuth <= 180.0:
            raise ValueError(f"azimuth {self.azimuth} outside [-180, 180]")
        if not 60.0 <= self.fov_h <= 80.0:
            raise ValueError(f"fov_h {self.fov_h} outside [60, 80]")
        if self.out_width < 2 or self.out_height < 2:
            raise ValueError("crop output dimensions must be >= 2")


def sample_crop_specs(rng, count):
    """Draw ``count`` crop specs uniformly over the allowed parameter ranges."""
    return [CropSpec(elevation=float(rng.uniform(-20.0, 20.0)),
                     azimuth=float(rng.uniform(-180.0, 180.0)),
                     fov_h=float(rng.uniform(60.0, 80.0)))
            for _ in range(count)]


def crop_ray_directions(spec):
    """World-space unit rays for every output pixel of ``spec``.

    Pinhole camera looking down -Z; the camera is pitched by elevation,
    then yawed by azimuth, so the center ray lands at the spec's angles
    and azimuth changes commute with rotating the panorama.
    """
    w, h = spec.out_width, spec.out_height
    focal = (w / 2.0) / math.tan(math.radians(spec.fov_h) / 2.0)
    xs = (np.arange(w) + 0.5) - w / 2.0
    ys = h / 2.0 - (np.arange(h) + 0.5)
    cam = np.empty((h, w, 3))
    cam[:, :, 0] = xs[None, :] / focal
    cam[:, :, 1] = ys[:, None] / focal
    cam[:, :, 2] = -1.0
    cam /= np.linalg.norm(cam, axis=2, keepdims=True)

    e = math.radians(spec.elevation)
    a = math.radians(spec.azimuth)
    pitch = np.array([[1.0, 0.0, 0.0],
                      [0.0, math.cos(e), -math.sin(e)],
                      [0.0, math.sin(e), math.cos(e)]])
    yaw = np.array([[math.cos(a), 0.0, -math.sin(a)],
                    [0.0, 1.0, 0.0],
                    [math.sin(a), 0.0, math.cos(a)]])
    return cam @ pitch.T @ yaw.T


def bilinear_sample(pano, x, y):
    """Bilinear lookup at fractional pixels; wraps in azimuth, clamps at poles."""
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x1 = (x0 + 1) % pano.width
    x0 = x0 % pano.width
    y1 = np.clip(y0 + 1, 0, pano.height - 1)
    y0 = np.clip(y0, 0, pano.height - 1)
    px = pano.pixels
    top = px[y0, x0] * (1.0 - fx) + px[y0, x1] * fx
    bot = px[y1, x0] * (1.0 - fx) + px[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def sample_crop(pano, spec):
    """Perspective crop of a 3-channel panorama per ``spec``."""
    if pano.channels != 3:
        raise ValueError("crop sampling expects a 3-channel panorama")
    rays = crop_ray_directions(spec)
    xy = direction_to_pixel(rays, pano.width, pano.height)
    return from_array(bilinear_sample(pano, xy[..., 0], xy[..., 1]))


# ---------------------------------------------------------------------------
# PFM I/O (raw 32-bit floats, bottom-to-top scanlines)
# ---------------------------------------------------------------------------

def write_pfm(path, pano):
    scale = -1.0  # little-endian
    header = f"{'PF' if pano.channels == 3 else 'Pf'}\n" \
             f"{pano.width} {pano.height}\n{scale}\n"
    rows = pano.pixels[::-1].astype("<f4")
    atomic_write_bytes(path, header.encode("ascii") + rows.tobytes())


def _read_token(data, pos):
    while pos < len(data) and data[pos:pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PanoramaFormatError("unexpected end of PFM header", start)
    return data[start:pos], pos


def read_pfm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    magic, pos = _read_token(data, 0)
    if magic == b"PF":
        channels = 3
    elif magic == b"Pf":
        channels = 1
    else:
        raise PanoramaFormatError(f"bad PFM magic {magic!r}", 0)
    wtok, pos = _read_token(data, pos)
    htok, pos = _read_token(data, pos)
    stok, pos = _read_token(data, pos)
    try:
        width, height, scale = int(wtok), int(htok), float(stok)
    except ValueError:
        raise PanoramaFormatError("malformed PFM dimensions/scale", pos) from None
    if width < 1 or height < 1 or scale == 0.0:
        raise PanoramaFormatError("invalid PFM dimensions/scale", pos)
    pos += 1  # single whitespace byte terminates the header
    count = width * height * channels
    need = count * 4
    if len(data) - pos < need:
        raise PanoramaFormatError(
            f"truncated PFM payload, need {need} bytes", len(data))
    dtype = "<f4" if scale < 0.0 else ">f4"
    flat = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    px = flat.reshape(height, width, channels)[::-1].astype(np.float64)
    if abs(scale) != 1.0:
        px = px * abs(scale)
    return from_array(px)


# ---------------------------------------------------------------------------
# Radiance HDR I/O (shared-exponent RGBE, adaptive RLE scanlines)
# ---------------------------------------------------------------------------

def _encode_rgbe(pixels):
    """Float RGB rows -> uint8 RGBE. Max-channel mantissa rounds to 8 bits."""
    out = np.zeros(pixels.shape[:-1] + (4,), dtype=np.uint8)
    maxc = pixels.max(axis=-1)
    live = maxc >= 1e-32
    if not np.any(live):
        return out
    # frexp: maxc = f * 2**e with f in [0.5, 1)
    _, exp = np.frexp(maxc[live])
    scale = np.ldexp(1.0, -exp) * 256.0
    quant = pixels[live] * scale[..., None] + 0.5
    out[live, :3] = np.minimum(quant, 255.0).astype(np.uint8)
    out[live, 3] = (exp + 128).astype(np.uint8)
    return out


def _decode_rgbe(rgbe):
    out = np.zeros(rgbe.shape[:-1] + (3,), dtype=np.float64)
    exp = rgbe[..., 3].astype(np.int64)
    live = exp != 0
    scale = np.ldexp(1.0, exp[live] - 128 - 8)
    out[live] = rgbe[live, :3].astype(np.float64) * scale[..., None]
    return out


def _rle_pack(component):
    """Adaptive RLE for one scanline component (Radiance new-style)."""
    out = bytearray()
    n = len(component)
    i = 0
    while i < n:
        run_len = 1
        while i + run_len < n and run_len < 127 and \
                component[i + run_len] == component[i]:
            run_len += 1
        if run_len >= 4:
            out.append(128 + run_len)
            out.append(component[i])
            i += run_len
        else:
            start = i
            i += run_len
            # extend the literal until a 4+ run begins or we hit 128 bytes
            while i < n and i - start < 128:
                probe = 1
                while i + probe < n and probe < 4 and \
                        component[i + probe] == component[i]:
                    probe += 1
                if probe >= 4:
                    break
                i += probe
            if i - start > 128:
                i = start + 128
            out.append(i - start)
            out.extend(component[start:i])
    return bytes(out)


def write_radiance_hdr(path, pano):
    """Write a 3-channel panorama as RGBE with adaptive RLE scanlines."""
    if pano.channels != 3:
        raise ValueError("Radiance HDR requires 3 channels")
    buf = bytearray()
    buf += b"#?RADIANCE\n"
    buf += b"FORMAT=32-bit_rle_rgbe\n\n"
    buf += f"-Y {pano.height} +X {pano.width}\n".encode("ascii")
    rgbe = _encode_rgbe(pano.pixels)
    use_rle = 8 <= pano.width <= 32767
    for row in rgbe:
        if use_rle:
            buf += struct.pack("BBBB", 2, 2, pano.width >> 8, pano.width & 0xFF)
            for comp in range(4):
                buf += _rle_pack(row[:, comp].tobytes())
        else:
            buf += row.tobytes()
    atomic_write_bytes(path, bytes(buf))


def _read_line(data, pos):
    end = data.find(b"\n", pos)
    if end < 0:
        raise PanoramaFormatError("unterminated header line", pos)
    return data[pos:end], end + 1


def _rle_unpack(data, pos, width):
    """Decode one new-style RLE component; returns (bytes, new position)."""
    out = bytearray()
    while len(out) < width:
        if pos >= len(data):
            raise PanoramaFormatError("truncated RLE scanline", pos)
        count = data[pos]
        pos += 1
        if count > 128:  # run
            if pos >= len(data):
                raise PanoramaFormatError("truncated RLE run", pos)
            out += data[pos:pos + 1] * (count - 128)
            pos += 1
        else:  # literal dump
            if count == 0:
                raise PanoramaFormatError("zero-length RLE literal", pos - 1)
            if pos + count > len(data):
                raise PanoramaFormatError("truncated RLE literal", pos)
            out += data[pos:pos + count]
            pos += count
    if len(out) != width:
        raise PanoramaFormatError("RLE scanline overrun", pos)
    return bytes(out), pos


def _read_flat_scanlines(data, pos, width, height):
    """Flat RGBE pixels with old-style (1,1,1,count) repeat packets."""
    rgbe = np.zeros((height * width, 4), dtype=np.uint8)
    filled = 0
    shift = 0
    total = height * width
    while filled < total:
        if pos + 4 > len(data):
            raise PanoramaFormatError("truncated flat scanline data", pos)
        px = np.frombuffer(data, dtype=np.uint8, count=4, offset=pos)
        pos += 4
        if px[0] == 1 and px[1] == 1 and px[2] == 1:
            if filled == 0:
                raise PanoramaFormatError("old-style run with no prior pixel", pos - 4)
            count = int(px[3]) << shift
            if filled + count > total:
                raise PanoramaFormatError("old-style run overruns image", pos - 4)
            rgbe[filled:filled + count] = rgbe[filled - 1]
            filled += count
            shift += 8
        else:
            rgbe[filled] = px
            filled += 1
            shift = 0
    return rgbe.reshape(height, width, 4), pos


def read_radiance_hdr(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) == 0:
        raise PanoramaFormatError("empty file", 0)
    line, pos = _read_line(data, 0)
    if not line.startswith(b"#?"):
        raise PanoramaFormatError(f"bad Radiance magic {line[:16]!r}", 0)
    fmt_ok = False
    while True:
        line, pos = _read_line(data, pos)
        if line.startswith(b"FORMAT="):
            if line != b"FORMAT=32-bit_rle_rgbe":
                raise PanoramaFormatError(f"unsupported format {line!r}", pos)
            fmt_ok = True
        elif line == b"":
            break
    if not fmt_ok:
        raise PanoramaFormatError("missing FORMAT header", pos)
    res_line, pos = _read_line(data, pos)
    parts = res_line.split()
    if len(parts) != 4 or parts[0] != b"-Y" or parts[2] != b"+X":
        raise PanoramaFormatError(f"unsupported resolution line {res_line!r}", pos)
    try:
        height, width = int(parts[1]), int(parts[3])
    except ValueError:
        raise PanoramaFormatError("malformed resolution line", pos) from None
    if height < 1 or width < 1:
        raise PanoramaFormatError("invalid resolution", pos)

    rows = []
    row_idx = 0
    while row_idx < height:
        if pos + 4 > len(data):
            raise PanoramaFormatError(f"truncated at scanline {row_idx}", pos)
        head = data[pos:pos + 4]
        if head[0] == 2 and head[1] == 2 and head[2] & 0x80 == 0:
            if (head[2] << 8) | head[3] != width:
                raise PanoramaFormatError("RLE scanline width mismatch", pos)
            pos += 4
            comps = []
            for _ in range(4):
                comp, pos = _rle_unpack(data, pos, width)
                comps.append(np.frombuffer(comp, dtype=np.uint8))
            rows.append(np.stack(comps, axis=1))
            row_idx += 1
        else:
            # old-style / uncompressed: consume everything that remains
            flat, pos = _read_flat_scanlines(data, pos, width, height - row_idx)
            rows.extend(flat)
            row_idx = height
    rgbe = np.stack(rows, axis=0)
    return from_array(_decode_rgbe(rgbe))
