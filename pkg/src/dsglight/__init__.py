"""DSGLight: depth-augmented spherical Gaussian lighting toolkit."""

from .fitter import FitReport, NnlsError, NormalSystem, build_normal_system, \
    fit_light, nnls_solve
from .panorama import CropSpec, Panorama, PanoramaFormatError, aces_weight, \
    direction_to_pixel, pixel_to_direction, psnr, read_pfm, \
    read_radiance_hdr, sample_crop, tonemap_ldr, write_pfm, \
    write_radiance_hdr
from .sg_model import DsgLight, diffuse_irradiance, light_from_json, \
    light_to_json, mixture_eval, reconstruct_panorama, sg_eval, warp_probe
from .sphere_layout import GraphSpec, NodeLayout, bandwidth, build_layout, \
    knn_adjacency, normalize_adjacency, place_nodes

__version__ = "0.1.0"

__all__ = [
    "CropSpec", "DsgLight", "FitReport", "GraphSpec", "NnlsError",
    "NodeLayout", "NormalSystem", "Panorama", "PanoramaFormatError",
    "aces_weight", "bandwidth", "build_layout", "build_normal_system",
    "diffuse_irradiance", "direction_to_pixel", "fit_light", "knn_adjacency",
    "light_from_json", "light_to_json", "mixture_eval", "nnls_solve",
    "normalize_adjacency", "pixel_to_direction", "place_nodes", "psnr",
    "read_pfm", "read_radiance_hdr", "reconstruct_panorama", "sample_crop",
    "sg_eval", "tonemap_ldr", "warp_probe", "write_pfm",
    "write_radiance_hdr",
]
