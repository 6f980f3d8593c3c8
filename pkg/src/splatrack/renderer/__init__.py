"""Differentiable EWA splatting."""
from .core import (
    RasterSettings,
    RenderContractError,
    RenderedMaps,
    densification_mask,
    depth_order,
    footprint_mass,
    normalized_visibility,
    rasterize,
    rasterize_backward,
    render,
    render_backward,
    sigmoid,
)
from .projection import DILATION, NEAR_PLANE, Projection, project_gaussians, project_gaussians_backward

__all__ = [
    "DILATION",
    "NEAR_PLANE",
    "Projection",
    "RasterSettings",
    "RenderContractError",
    "RenderedMaps",
    "densification_mask",
    "depth_order",
    "footprint_mass",
    "normalized_visibility",
    "project_gaussians",
    "project_gaussians_backward",
    "rasterize",
    "rasterize_backward",
    "render",
    "render_backward",
    "sigmoid",
]
