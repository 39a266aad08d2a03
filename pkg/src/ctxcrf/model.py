"""Model configuration and the two-stage prediction pipeline."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .featmap import FeatMapConfig, output_size
from .graph import RangeBoxSpec, SamplingSpec, build_graph
from .inference import coarse_score_map, mean_field
from .potentials import ModelParams, compute_table
from .refine import RefineConfig, local_refine, upsample_scores


@dataclass
class ModelConfig:
    num_classes: int = 6
    featmap: FeatMapConfig = field(default_factory=FeatMapConfig)
    relations: tuple = (RangeBoxSpec("surrounding", 0.4), RangeBoxSpec("above_below", 0.4))
    sampling_grid: int | None = 5
    num_unary: int = 1
    unary_hidden: int = 64
    pairwise_hidden: int = 64
    mean_field_iterations: int = 3
    damping: float = 0.0
    unary_weight: float = 1.0
    pairwise_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.num_unary < 1:
            raise ValueError("need at least one unary potential")
        kinds = [r.kind for r in self.relations]
        if len(set(kinds)) != len(kinds):
            raise ValueError("each relation kind may appear once")

    def graph_for(self, height, width):
        return build_graph(height, width, self.relations, SamplingSpec(self.sampling_grid), self.num_classes)

    def graph_for_image(self, image_h, image_w):
        return self.graph_for(*output_size(image_h, image_w, self.featmap))

    def init_params(self) -> ModelParams:
        return ModelParams.init(self.num_classes, self.featmap, [r.kind for r in self.relations],
                                self.num_unary, self.unary_hidden, self.pairwise_hidden,
                                np.random.default_rng(self.seed))


def coarse_marginals(params: ModelParams, image, config: ModelConfig):
    """Mean-field marginals on the feature-map grid, shape (h, w, K)."""
    h, w = output_size(image.shape[0], image.shape[1], config.featmap)
    graph = config.graph_for(h, w)
    table = compute_table(params, image, graph, config.unary_weight, config.pairwise_weight)
    q = mean_field(table, graph, config.mean_field_iterations, config.damping)
    return coarse_score_map(q, graph, h, w)


def predict(params: ModelParams, image, config: ModelConfig, refine: RefineConfig | None = None):
    """Full-resolution labels and the coarse marginals they came from."""
    coarse = coarse_marginals(params, image, config)
    scores = upsample_scores(coarse, image.shape[0], image.shape[1])
    refine = RefineConfig(enabled=False) if refine is None else refine
    return local_refine(scores, image, refine), coarse


# ---------------------------------------------------------------------------
# checkpoints

def params_to_blocks(params: ModelParams) -> dict:
    out = {}
    for name, lp in params.named_layers().items():
        out[name + ".w"] = lp.weights
        out[name + ".b"] = lp.bias
    return out


def save_checkpoint(path, params: ModelParams, header: dict):
    checkpoint.save(path, params_to_blocks(params), header)


def load_params(blocks: dict, config: ModelConfig) -> ModelParams:
    params = config.init_params()
    for name, lp in params.named_layers().items():
        try:
            w, b = blocks[name + ".w"], blocks[name + ".b"]
        except KeyError as exc:
            raise checkpoint.CheckpointError(f"checkpoint lacks block {exc.args[0]}") from None
        if w.shape != lp.weights.shape or b.shape != lp.bias.shape:
            raise checkpoint.CheckpointError(f"block {name} has the wrong shape")
        lp.weights[...] = w
        lp.bias[...] = b
    return params
