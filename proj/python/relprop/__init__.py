"""Layer-wise relevance propagation over small convolutional graphs.

Images and feature maps are float64 numpy arrays in (n, c, h, w) order;
functions also accept (c, h, w) for a single sample. A typical session::

    import relprop

    graph = relprop.build_toy_model("toy-pid")
    image, mask, boxes = relprop.render_scene(seed=0)
    tape = relprop.forward(graph, image)
    ex = relprop.lrp(tape)                     # flood region by default
    ex.conservation["residual"]                # ~0: relevance is booked
    ex.concept_vector("head1")                 # per-channel relevance
"""

from relprop._core import (
    CLASS_BACKGROUND,
    CLASS_FLOOD,
    CLASS_ROAD,
    Explanation,
    ForwardTape,
    Gmm,
    Graph,
    OutlierCalibration,
    Target,
    build_toy_model,
    channel_scores,
    conditional_heatmap,
    cosine_similarity,
    deletion_curve,
    fit_gmm,
    forward,
    gradient,
    insertion_curve,
    load_dataset,
    load_model,
    lrp,
    normalize_l1,
    paired_sign_test,
    rank_channels,
    render_heatmap,
    render_scene,
    save_model,
    select,
    target,
    train,
    write_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "CLASS_BACKGROUND",
    "CLASS_FLOOD",
    "CLASS_ROAD",
    "Explanation",
    "ForwardTape",
    "Gmm",
    "Graph",
    "OutlierCalibration",
    "Target",
    "build_toy_model",
    "channel_scores",
    "conditional_heatmap",
    "cosine_similarity",
    "deletion_curve",
    "fit_gmm",
    "forward",
    "gradient",
    "insertion_curve",
    "load_dataset",
    "load_model",
    "lrp",
    "normalize_l1",
    "paired_sign_test",
    "rank_channels",
    "render_heatmap",
    "render_scene",
    "save_model",
    "select",
    "target",
    "train",
    "write_dataset",
]
