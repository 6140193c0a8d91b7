"""ROI re-weighting and image/attribute cross-attention network.

All forward functions take a ``ModelParams`` (or a mapping of parameter
name -> ``Node`` built by ``ModelParams.nodes``) and return graph nodes, so
the same code serves training, inference and gradient checks.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Node
from .errors import ShapeMismatch, UninitializedRunningStats


@dataclass
class RoiSet:
    """Frozen detector output for one image: features, scores and boxes."""

    image_id: str
    feats: np.ndarray   # (N, roi_dim)
    scores: np.ndarray  # (N,)
    boxes: np.ndarray   # (N, 4) normalized x1, y1, x2, y2

    def __post_init__(self):
        self.feats = np.asarray(self.feats, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        n = self.feats.shape[0] if self.feats.ndim == 2 else -1
        if n < 1 or self.scores.shape[0] != n or self.boxes.shape[0] != n:
            raise ShapeMismatch("RoiSet", self.feats.shape, self.scores.shape, self.boxes.shape)
        if not (np.isfinite(self.feats).all() and np.isfinite(self.scores).all()):
            raise ValueError(f"{self.image_id}: non-finite ROI feature or score")
        b = self.boxes
        if not ((b[:, 0] < b[:, 2]).all() and (b[:, 1] < b[:, 3]).all()):
            raise ValueError(f"{self.image_id}: boxes need x1 < x2 and y1 < y2")
        if b.min() < 0.0 or b.max() > 1.0:
            raise ValueError(f"{self.image_id}: boxes must be normalized to [0, 1]")

    def __len__(self):
        return self.feats.shape[0]

    @property
    def roi_dim(self) -> int:
        return self.feats.shape[1]

    def subset(self, index) -> "RoiSet":
        index = np.asarray(index, dtype=np.intp)
        return RoiSet(self.image_id, self.feats[index], self.scores[index], self.boxes[index])


@dataclass
class ModelConfig:
    roi_dim: int = 64
    dim: int = 256
    geom_dim: int = 32
    score_dim: int = 32
    alpha_hidden: tuple[int, ...] = (1024, 512)
    cls_hidden: tuple[int, ...] = (512, 512, 256, 128)
    n_attrs: int = 22
    lam_a: float = 1.0
    lam_b: float = 1.0
    beta: float = 0.8
    leaky_slope: float = 0.01
    ln_eps: float = 1e-5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    sim_eps: float = 1e-8  # guard for the per-column similarity normalization

    def __post_init__(self):
        self.alpha_hidden = tuple(self.alpha_hidden)
        self.cls_hidden = tuple(self.cls_hidden)
        if self.lam_a <= 0 or self.lam_b <= 0:
            raise ValueError("similarity temperatures must be positive")
        if not 0.0 < self.beta < 2.0:
            raise ValueError("triplet margin must lie in (0, 2)")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    stats_ready: bool = False

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def nodes(self, trainable: bool = True) -> dict[str, Node]:
        make = ag.param if trainable else ag.const
        return {k: make(v) for k, v in self.tensors.items()}

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


def _layer_sizes(cfg: ModelConfig):
    yield "roi", cfg.roi_dim, cfg.dim
    yield "geom", 4, cfg.geom_dim
    yield "score", 1, cfg.score_dim
    yield "fuse", cfg.geom_dim + cfg.score_dim, cfg.dim
    sizes = (cfg.dim, *cfg.alpha_hidden)
    for k in range(len(cfg.alpha_hidden)):
        yield f"alpha.{k}", sizes[k], sizes[k + 1]
    yield "alpha.out", sizes[-1], 1
    sizes = (cfg.dim, *cfg.cls_hidden)
    for k in range(len(cfg.cls_hidden)):
        yield f"cls.{k}", sizes[k], sizes[k + 1]
    yield "cls.out", sizes[-1], cfg.n_attrs


def init_params(cfg: ModelConfig | None = None, seed: int = 0) -> ModelParams:
    """Xavier-uniform weights, zero biases, unit norm gains."""
    cfg = cfg or ModelConfig()
    rng = np.random.default_rng(seed)
    t: dict[str, np.ndarray] = {}
    for name, fan_in, fan_out in _layer_sizes(cfg):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        t[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        t[f"{name}.b"] = np.zeros((1, fan_out))
    for name, d in (("ln_geom", cfg.geom_dim), ("ln_score", cfg.score_dim)):
        t[f"{name}.gain"] = np.ones((1, d))
        t[f"{name}.bias"] = np.zeros((1, d))
    buffers = {}
    for k, h in enumerate(cfg.cls_hidden):
        t[f"cls.{k}.bn_gain"] = np.ones((1, h))
        t[f"cls.{k}.bn_bias"] = np.zeros((1, h))
        buffers[f"cls.{k}.running_mean"] = np.zeros(h)
        buffers[f"cls.{k}.running_var"] = np.ones(h)
    return ModelParams(cfg, t, buffers)


def _resolve(params) -> tuple[ModelConfig, Mapping[str, Node], ModelParams | None]:
    if isinstance(params, ModelParams):
        return params.config, params.nodes(trainable=False), params
    if isinstance(params, ModelConfig):  # enough for the parameter-free attention ops
        return params, {}, None
    cfg_params = params
    return cfg_params.config, cfg_params.graph, cfg_params.owner


@dataclass
class GraphParams:
    """Parameter nodes bound to a ModelParams for one forward/backward pass."""

    owner: ModelParams
    graph: dict[str, Node]

    @property
    def config(self) -> ModelConfig:
        return self.owner.config

    @classmethod
    def trainable(cls, params: ModelParams) -> "GraphParams":
        return cls(params, params.nodes(trainable=True))

    def grads(self) -> dict[str, np.ndarray]:
        return {k: n.grad for k, n in self.graph.items()}


# ---------------------------------------------------------------- forward ops

def _linear(x: Node, P: Mapping[str, Node], name: str) -> Node:
    return ag.add(ag.matmul(x, P[f"{name}.W"]), P[f"{name}.b"])


def transform_roi(roi_set: RoiSet, params) -> Node:
    """(N, dim) modified ROI features: roi projection plus fused geometry/score."""
    cfg, P, _ = _resolve(params)
    if roi_set.roi_dim != cfg.roi_dim:
        raise ShapeMismatch("transform_roi", roi_set.feats.shape, (cfg.roi_dim,))
    geom = ag.layer_norm(_linear(ag.const(roi_set.boxes), P, "geom"),
                         P["ln_geom.gain"], P["ln_geom.bias"], cfg.ln_eps)
    score = ag.layer_norm(_linear(ag.const(roi_set.scores[:, None]), P, "score"),
                          P["ln_score.gain"], P["ln_score.bias"], cfg.ln_eps)
    fused = _linear(ag.concat([geom, score], axis=1), P, "fuse")
    return ag.add(_linear(ag.const(roi_set.feats), P, "roi"), fused)


def roi_scores(phi: Node, params) -> Node:
    """(N, 1) sigmoid head of the ROI-weight MLP, before the softmax over ROIs."""
    cfg, P, _ = _resolve(params)
    phi = ag.as_node(phi)
    if phi.value.ndim != 2 or phi.shape[1] != cfg.dim:
        raise ShapeMismatch("roi_weights", phi.shape, (cfg.dim,))
    h = phi
    for k in range(len(cfg.alpha_hidden)):
        h = ag.leaky_relu(_linear(h, P, f"alpha.{k}"), cfg.leaky_slope)
    return ag.sigmoid(_linear(h, P, "alpha.out"))


def roi_weights(phi: Node, params) -> Node:
    """(N,) alpha weights: softmax over ROIs of the sigmoid MLP output."""
    s = roi_scores(phi, params)
    return ag.reshape(ag.softmax(s, axis=0), (s.shape[0],))


def aggregate(phi, alpha) -> Node:
    """(dim,) alpha-weighted sum of ROI features."""
    phi, alpha = ag.as_node(phi), ag.as_node(alpha)
    n = phi.shape[0]
    if alpha.value.size != n:
        raise ShapeMismatch("aggregate", phi.shape, alpha.shape)
    return ag.reshape(ag.matmul(ag.reshape(alpha, (1, n)), phi), (phi.shape[1],))


def classify_attributes(v, params, mode: str = "train", stats: list | None = None) -> Node:
    """Attribute probabilities for one aggregate vector (dim,) or a batch (B, dim).

    ``mode="train"`` normalizes with batch statistics and, when ``stats`` is
    a list, appends each layer's ``(mean, biased_var, batch_size)``;
    ``mode="infer"`` uses the running statistics.
    """
    cfg, P, owner = _resolve(params)
    v = ag.as_node(v)
    single = v.value.ndim == 1
    h = ag.reshape(v, (1, v.shape[0])) if single else v
    if h.shape[1] != cfg.dim:
        raise ShapeMismatch("classify_attributes", v.shape, (cfg.dim,))
    if mode == "infer" and (owner is None or not owner.stats_ready):
        raise UninitializedRunningStats("classifier has no running batch-norm statistics yet")
    for k in range(len(cfg.cls_hidden)):
        h = ag.leaky_relu(_linear(h, P, f"cls.{k}"), cfg.leaky_slope)
        gain, bias = P[f"cls.{k}.bn_gain"], P[f"cls.{k}.bn_bias"]
        if mode == "train":
            h, mu, var = ag.batch_norm(h, gain, bias, cfg.bn_eps)
            if stats is not None:
                stats.append((mu, var, h.shape[0]))
        elif mode == "infer":
            rm = owner.buffers[f"cls.{k}.running_mean"]
            rv = owner.buffers[f"cls.{k}.running_var"]
            h = ag.mul(ag.sub(h, rm[None, :]), 1.0 / np.sqrt(rv + cfg.bn_eps)[None, :])
            h = ag.add(ag.mul(h, gain), bias)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    p = ag.sigmoid(_linear(h, P, "cls.out"))
    return ag.reshape(p, (cfg.n_attrs,)) if single else p


def update_running_stats(params: ModelParams, stats: Sequence[tuple]) -> None:
    """Fold train-mode batch statistics into the running averages."""
    mom = params.config.bn_momentum
    for k, (mu, var, n) in enumerate(stats):
        unbiased = var * n / (n - 1) if n > 1 else var
        rm = params.buffers[f"cls.{k}.running_mean"]
        rv = params.buffers[f"cls.{k}.running_var"]
        rm *= 1.0 - mom
        rm += mom * mu
        rv *= 1.0 - mom
        rv += mom * unbiased
    params.stats_ready = True


# ----------------------------------------------------------- cross-attention

@dataclass
class CrossAttentionState:
    s_raw: Node  # (N, M) cosine similarities
    s: Node      # (N, M) hinged, column-normalized
    a: Node      # (N, M) softmax over attributes j
    b: Node      # (N, M) softmax over ROIs i
    A: Node      # (M, dim)
    B: Node      # (N, dim)


@dataclass
class SimilarityScores:
    R_text: Node  # (M,)
    R_roi: Node   # (N,)
    S_roi: Node
    S_text: Node


def normalize_similarity(s_raw: Node, eps: float = 1e-8) -> Node:
    """Clip negatives to zero, then L2-normalize each attribute column over the ROIs."""
    return ag.l2_normalize(ag.hinge(s_raw), axis=0, eps=eps)


def cross_attention(phi, alpha, attr_embeds, params) -> CrossAttentionState:
    cfg, _, _ = _resolve(params)
    phi, alpha, m = ag.as_node(phi), ag.as_node(alpha), ag.as_node(attr_embeds)
    n = phi.shape[0]
    if m.value.ndim != 2 or m.shape[0] < 1 or m.shape[1] != phi.shape[1] or alpha.value.size != n:
        raise ShapeMismatch("cross_attention", phi.shape, alpha.shape, m.shape)
    s_raw = ag.cosine_similarity(phi, m, pairwise=True)
    s = normalize_similarity(s_raw, cfg.sim_eps)
    a = ag.softmax(s, axis=1, temperature=cfg.lam_a)
    b = ag.softmax(s, axis=0, temperature=cfg.lam_b)
    weighted = ag.mul(a, ag.reshape(alpha, (n, 1)))
    A = ag.matmul(ag.transpose(weighted), phi)
    B = ag.matmul(b, m)
    return CrossAttentionState(s_raw, s, a, b, A, B)


def pooled_similarities(state: CrossAttentionState, phi, alpha, attr_embeds) -> SimilarityScores:
    phi, m = ag.as_node(phi), ag.as_node(attr_embeds)
    if state.A.shape != m.shape or state.B.shape != phi.shape:
        raise ShapeMismatch("pooled_similarities", state.A.shape, m.shape, state.B.shape, phi.shape)
    r_text = ag.cosine_similarity(state.A, m, pairwise=False)
    r_roi = ag.cosine_similarity(state.B, phi, pairwise=False)
    return SimilarityScores(r_text, r_roi, ag.mean(r_roi), ag.mean(r_text))


def similarity(phi, alpha, attr_embeds, params) -> SimilarityScores:
    state = cross_attention(phi, alpha, attr_embeds, params)
    return pooled_similarities(state, phi, alpha, attr_embeds)


# --------------------------------------------------------------------- losses

def triplet_loss(s_roi_pos, s_roi_neg, s_text_pos, s_text_neg, beta: float = 0.8) -> Node:
    roi_term = ag.hinge(ag.add(ag.sub(beta, s_roi_pos), s_roi_neg))
    text_term = ag.hinge(ag.add(ag.sub(beta, s_text_pos), s_text_neg))
    return ag.add(roi_term, text_term)


def bce_loss(p, targets) -> Node:
    return ag.bce_with_targets(p, targets, eps=1e-7)


@dataclass
class Negatives:
    roi_index: np.ndarray     # rows of the sample's RoiSet used as I_n
    attr_embeds: np.ndarray   # (M, dim) embeddings of the negative words (T_n)


@dataclass
class LossBundle:
    trip: float
    bce: float
    total: float
    node: Node | None = field(default=None, repr=False)


def batch_loss(samples: Sequence, negatives: Sequence[Negatives], params,
               mode: str = "train", stats: list | None = None) -> LossBundle:
    """Mean triplet + mean BCE over a batch; differentiable w.r.t. ``params``.

    Each sample needs ``roi_set``, ``attr_embeds`` (M, dim) and ``target``
    (n_attrs,).  The ROI features of all samples go through the feature
    transform and ROI-weight MLP as one stacked matrix.
    """
    cfg, P, owner = _resolve(params)
    if not samples:
        raise ValueError("empty batch")
    counts = [len(s.roi_set) for s in samples]
    stacked = RoiSet("batch", np.concatenate([s.roi_set.feats for s in samples]),
                     np.concatenate([s.roi_set.scores for s in samples]),
                     np.concatenate([s.roi_set.boxes for s in samples]))
    phi_all = transform_roi(stacked, params)
    score_all = roi_scores(phi_all, params)

    trips, vs = [], []
    start = 0
    for sample, neg, n in zip(samples, negatives, counts):
        rows = slice(start, start + n)
        start += n
        phi = ag.take_rows(phi_all, rows)
        alpha = ag.reshape(ag.softmax(ag.take_rows(score_all, rows), axis=0), (n,))
        vs.append(ag.reshape(aggregate(phi, alpha), (1, cfg.dim)))

        m_pos = ag.const(sample.attr_embeds)
        pos = similarity(phi, alpha, m_pos, params)
        neg_rows = np.asarray(neg.roi_index, dtype=np.intp)
        phi_n = ag.take_rows(phi, neg_rows)
        alpha_n = ag.reshape(ag.softmax(ag.take_rows(ag.take_rows(score_all, rows), neg_rows), axis=0),
                             (neg_rows.size,))
        neg_roi = similarity(phi_n, alpha_n, m_pos, params)
        neg_text = similarity(phi, alpha, ag.const(neg.attr_embeds), params)
        trips.append(ag.reshape(triplet_loss(pos.S_roi, neg_roi.S_roi, pos.S_text, neg_text.S_text,
                                             cfg.beta), (1, 1)))

    p = classify_attributes(ag.concat(vs, axis=0), params, mode=mode, stats=stats)
    targets = np.stack([np.asarray(s.target, dtype=np.float64) for s in samples])
    bce = bce_loss(p, targets)
    trip = ag.mean(ag.concat(trips, axis=0))
    total = ag.add(trip, bce)
    return LossBundle(float(trip.value), float(bce.value), float(total.value), total)


def total_loss(sample, negatives: Negatives, params, mode: str = "train") -> LossBundle:
    """Loss for a single sample (batch of one)."""
    return batch_loss([sample], [negatives], params, mode=mode)
