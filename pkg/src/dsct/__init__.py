"""Dual-spectral fan-beam CT: simulation, row-action reconstruction,
datasets and metrics."""

__version__ = "0.1.0"

from .geometry import (FanBeamGeometry, ImageGrid, ProjectionMatrix,
                       build_projection_matrix, fov_radius, geometry_from_doc,
                       geometry_key, grid_for_fov, load_or_build, ray_endpoints)
from .spectra import (MaterialTable, SpectrumTable, align, bundled_materials,
                      bundled_spectrum, is_normalized, load_materials, load_spectrum, normalize)
from .phantom import Ellipse, ImagePair, draw_ellipses, generate_pair, rasterize
from .forward import SinogramPair, add_poisson_noise, forward_project
from .opmt import (OpmtConfig, ReconState, compute_direction, linearize_ray,
                   residuals_csv, run, run_eart, write_residuals)
from .metrics import (MetricReport, average_reports, evaluate_pair, mse, psnr,
                      ssim, table_csv)
from .dataset import (DatasetSpec, build_dataset, load_sample, read_manifest,
                      read_tensor, split_counts, write_tensor)

__all__ = [
    "FanBeamGeometry", "ImageGrid", "ProjectionMatrix",
    "build_projection_matrix", "fov_radius", "geometry_from_doc",
    "geometry_key", "grid_for_fov", "load_or_build", "ray_endpoints",
    "MaterialTable", "SpectrumTable", "align", "bundled_materials",
    "bundled_spectrum", "is_normalized", "load_materials", "load_spectrum", "normalize",
    "Ellipse", "ImagePair", "draw_ellipses", "generate_pair", "rasterize",
    "SinogramPair", "add_poisson_noise", "forward_project",
    "OpmtConfig", "ReconState", "compute_direction", "linearize_ray",
    "residuals_csv", "run", "run_eart", "write_residuals",
    "MetricReport", "average_reports", "evaluate_pair", "mse", "psnr",
    "ssim", "table_csv",
    "DatasetSpec", "build_dataset", "load_sample", "read_manifest",
    "read_tensor", "split_counts", "write_tensor",
]
