"""Graph reasoning over the heterogeneous graph and the full classifier."""

import logging
from dataclasses import dataclass, field

import numpy as np

from hgfx.config import ModelConfig
from hgfx.errors import ShapeError
from hgfx.services.adaptive_scan import ScanPlan, plan_batch, raster_plan
from hgfx.services.cross_modal import MappingParams, cross_modal_correlation
from hgfx.services.hetero_graph import Adjacency, HeteroGraph, build_hetero_graph
from hgfx.services.layers import MLP, LayerNorm, Linear, Module
from hgfx.services.patch_embed import ImageSample, NodeSet, PatchEmbedding
from hgfx.services.ssm_encoder import SSMParams, encode_semantic
from hgfx.tensor import (
    Tensor,
    amax,
    concat,
    dropout,
    gather_rows,
    leaky_relu,
    mean,
    reshape,
    sum,
    take_lastdim,
    unsqueeze,
)

logger = logging.getLogger(__name__)


def aggregate(gh: HeteroGraph) -> Tensor:
    """Max-relative aggregation: concat(v_vi, max_j (v_sj - v_vi)) over the k neighbours.

    When the graph carries H, each difference is scaled by k * H_ij
    renormalized over the selected neighbours, so uniform H (or k = 1)
    reduces to the plain rule.
    """
    V_v, V_s, idx = gh.V_v, gh.V_s, gh.adj.idx
    if idx.shape[:-1] != V_v.shape[:-1]:
        raise ShapeError(f"adjacency {idx.shape} doesn't cover visual nodes {V_v.shape}")
    diff = gather_rows(V_s, idx) - unsqueeze(V_v, -2)  # (..., N, k, D)
    if gh.H is not None:
        picked = take_lastdim(gh.H, idx)  # (..., N, k)
        weights = picked / sum(picked, axis=-1, keepdims=True) * float(gh.adj.k)
        diff = diff * unsqueeze(weights, -1)
    return concat([V_v, amax(diff, axis=-2)], axis=-1)


class ReasonBlockParams(Module):
    def __init__(self, dim: int, mapped_dim: int, rng: np.random.Generator, dtype=np.float64, slope: float = 0.2):
        self.norm1 = LayerNorm(dim, dtype)
        self.mapping = MappingParams(dim, mapped_dim, rng, dtype, slope)
        self.W_agg = Linear(2 * dim, dim, rng, dtype)
        self.W_update = Linear(dim, dim, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ffn = MLP(dim, 4 * dim, dim, rng, dtype, slope)


def reason_block(
    x: Tensor,
    graph: HeteroGraph,
    params: ReasonBlockParams,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Aggregate/update sub-layer then FFN sub-layer, each with a residual."""
    if x.shape != graph.V_v.shape:
        raise ShapeError(f"block input {x.shape} doesn't match graph centers {graph.V_v.shape}")
    update = params.W_update(leaky_relu(params.W_agg(aggregate(graph)), cfg.leaky_slope))
    y = x + dropout(update, cfg.dropout, rng, training)
    return y + dropout(params.ffn(params.norm2(y)), cfg.dropout, rng, training)


@dataclass
class ForwardTrace:
    """Intermediates captured during a forward pass, for export and inspection."""

    plans: list[ScanPlan] = field(default_factory=list)
    graphs: list[HeteroGraph] = field(default_factory=list)
    semantic: Tensor | None = None


class HeteroGraphNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, threads: int = 1):
        rng = np.random.default_rng(seed)
        dtype = cfg.np_dtype
        self.cfg = cfg
        self.threads = threads
        self.embed = PatchEmbedding(cfg.image_size, cfg.channels, cfg.patch_size, cfg.dim, rng, dtype)
        self.ssm = SSMParams(cfg.dim, cfg.state_dim, rng, dtype)
        self.sem_norm = LayerNorm(cfg.dim, dtype)
        self.blocks = [ReasonBlockParams(cfg.dim, cfg.mapped_dim, rng, dtype, cfg.leaky_slope) for _ in range(cfg.blocks)]
        self.head_norm = LayerNorm(cfg.dim, dtype)
        self.head = Linear(cfg.dim, cfg.classes, rng, dtype)

    @property
    def uses_semantic(self) -> bool:
        return self.cfg.hetero_graph or self.cfg.hetero_learning

    def active_named_parameters(self) -> list[tuple[str, Tensor]]:
        """Parameters the configured forward pass actually reaches."""
        skipped = []
        if not self.uses_semantic:
            skipped += ["ssm.", "sem_norm."]
        if not self.cfg.hetero_learning:
            skipped += [f"blocks.{i}.mapping." for i in range(len(self.blocks))]
        return [(n, p) for n, p in self.named_parameters() if not n.startswith(tuple(skipped))]

    def scan_plans(self, nodes: NodeSet) -> list[ScanPlan]:
        feats = nodes.features.data.reshape((-1,) + nodes.features.shape[-2:])
        if self.cfg.adaptive_scan:
            return plan_batch(feats, self.cfg.dist_eps, self.threads)
        return [raster_plan(nodes.n_nodes)] * feats.shape[0]

    def __call__(
        self,
        pixels: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
        trace: ForwardTrace | None = None,
    ) -> Tensor:
        """Logits [B, classes] for a batch of images (B, H, W, C)."""
        cfg = self.cfg
        if pixels.ndim != 4:
            raise ShapeError(f"expected a (B, H, W, C) batch, got {pixels.shape}")
        nodes = self.embed(pixels)
        x = nodes.features
        dilation = cfg.effective_dilation(nodes.n_nodes)

        semantic = None
        if self.uses_semantic:
            plans = self.scan_plans(nodes)
            semantic = self.sem_norm(encode_semantic(nodes, plans, self.ssm).features)
            if trace is not None:
                trace.plans.extend(plans)
                trace.semantic = semantic

        for block in self.blocks:
            xn = block.norm1(x)
            pool = semantic if cfg.hetero_graph else xn
            H = None
            if cfg.hetero_learning:
                H = cross_modal_correlation(xn, semantic, block.mapping, cfg.leaky_slope).H
            graph = build_hetero_graph(xn, pool, H, cfg.k, dilation)
            if trace is not None:
                trace.graphs.append(graph)
            x = reason_block(x, graph, block, cfg, rng, training)

        return self.head(mean(self.head_norm(x), axis=-2))

    def check_stability(self) -> float:
        """Largest |A_bar|; must stay below 1."""
        return self.ssm.max_abs_A_bar()


def forward(img: ImageSample, model: HeteroGraphNet) -> Tensor:
    """Logits of length ``classes`` for one image, dropout disabled."""
    pixels = img.pixels.astype(model.cfg.np_dtype)[None]
    logits = model(pixels, training=False)
    return reshape(logits, (model.cfg.classes,))


def trace_image(img: ImageSample, model: HeteroGraphNet) -> ForwardTrace:
    trace = ForwardTrace()
    model(img.pixels.astype(model.cfg.np_dtype)[None], training=False, trace=trace)
    return trace


def image_scan_plan(img: ImageSample, model: HeteroGraphNet) -> ScanPlan:
    """The scan plan the model uses for ``img``; visual-only models still get the adaptive plan of their embedding."""
    if model.uses_semantic:
        return trace_image(img, model).plans[0]
    nodes = model.embed(img.pixels.astype(model.cfg.np_dtype))
    return plan_batch(nodes.features.data[None], model.cfg.dist_eps)[0]


def image_adjacency(img: ImageSample, model: HeteroGraphNet, block: int = 0) -> Adjacency:
    if not 0 <= block < len(model.blocks):
        raise ShapeError(f"block {block} out of range for a {len(model.blocks)}-block model")
    adj = trace_image(img, model).graphs[block].adj
    return Adjacency(adj.k, adj.dilation, adj.idx[0])
