from .splat import (
    BLUR,
    COVERAGE_FLOOR,
    NEAR,
    TILE,
    Frame,
    RenderedView,
    SplatGradients,
    labels_from_identity,
    render,
    render_labels,
    render_with_gradients,
)

__all__ = [
    "BLUR", "COVERAGE_FLOOR", "NEAR", "TILE", "Frame", "RenderedView", "SplatGradients",
    "labels_from_identity", "render", "render_labels", "render_with_gradients",
]
