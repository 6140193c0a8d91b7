"""Finite-difference checks for every autodiff primitive and the full loss graph."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .model import GraphParams, ModelConfig, Negatives, RoiSet, batch_loss, init_params

TOLERANCE = 1e-4


def _away_from_zero(rng, shape, lo=0.1, hi=1.5):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _weighted(out: ag.Node, w: np.ndarray) -> ag.Node:
    """Scalar objective sum(out * w) so no gradient is trivially uniform."""
    return ag.sum(ag.mul(out, ag.const(w)))


@dataclass
class PrimitiveCase:
    name: str
    make: Callable[[np.random.Generator], tuple[Callable, dict]]


def _case_add(rng):
    w = rng.standard_normal((3, 4))
    return (lambda n: _weighted(ag.add(n["a"], n["b"]), w),
            {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((1, 4))})


def _case_sub(rng):
    w = rng.standard_normal((3, 4))
    return (lambda n: _weighted(ag.sub(n["a"], n["b"]), w),
            {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((3, 1))})


def _case_mul(rng):
    w = rng.standard_normal((3, 4))
    return (lambda n: _weighted(ag.mul(n["a"], n["b"]), w),
            {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((1, 4))})


def _case_scale(rng):
    w, c = rng.standard_normal((2, 3)), float(rng.normal())
    return lambda n: _weighted(ag.scale(n["a"], c), w), {"a": rng.standard_normal((2, 3))}


def _case_matmul(rng):
    w = rng.standard_normal((3, 2))
    return (lambda n: _weighted(ag.matmul(n["a"], n["b"]), w),
            {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2))})


def _case_transpose(rng):
    w = rng.standard_normal((4, 3))
    return lambda n: _weighted(ag.transpose(n["a"]), w), {"a": rng.standard_normal((3, 4))}


def _case_concat(rng):
    w = rng.standard_normal((3, 5))
    return (lambda n: _weighted(ag.concat([n["a"], n["b"]], axis=1), w),
            {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal((3, 3))})


def _case_take_rows(rng):
    idx = np.array([2, 0, 2])
    w = rng.standard_normal((3, 3))
    return lambda n: _weighted(ag.take_rows(n["a"], idx), w), {"a": rng.standard_normal((4, 3))}


def _case_reshape(rng):
    w = rng.standard_normal((6,))
    return lambda n: _weighted(ag.reshape(n["a"], (6,)), w), {"a": rng.standard_normal((2, 3))}


def _case_sum(rng):
    w = rng.standard_normal((1, 4))
    return lambda n: _weighted(ag.sum(n["a"], axis=0, keepdims=True), w), {"a": rng.standard_normal((3, 4))}


def _case_mean(rng):
    w = rng.standard_normal((3,))
    return lambda n: _weighted(ag.mean(n["a"], axis=1), w), {"a": rng.standard_normal((3, 4))}


def _case_leaky_relu(rng):
    w = rng.standard_normal((3, 4))
    return lambda n: _weighted(ag.leaky_relu(n["a"], 0.01), w), {"a": _away_from_zero(rng, (3, 4))}


def _case_hinge(rng):
    w = rng.standard_normal((3, 4))
    return lambda n: _weighted(ag.hinge(n["a"]), w), {"a": _away_from_zero(rng, (3, 4))}


def _case_sigmoid(rng):
    w = rng.standard_normal((3, 4))
    return lambda n: _weighted(ag.sigmoid(n["a"]), w), {"a": 2 * rng.standard_normal((3, 4))}


def _case_softmax(rng):
    w = rng.standard_normal((3, 4))
    axis, temp = int(rng.integers(2)), float(rng.uniform(0.5, 3.0))
    return (lambda n: _weighted(ag.softmax(n["a"], axis=axis, temperature=temp), w),
            {"a": rng.standard_normal((3, 4))})


def _case_layer_norm(rng):
    w = rng.standard_normal((3, 5))
    return (lambda n: _weighted(ag.layer_norm(n["x"], n["g"], n["b"]), w),
            {"x": rng.standard_normal((3, 5)), "g": rng.standard_normal((1, 5)),
             "b": rng.standard_normal((1, 5))})


def _case_batch_norm(rng):
    w = rng.standard_normal((4, 3))
    return (lambda n: _weighted(ag.batch_norm(n["x"], n["g"], n["b"])[0], w),
            {"x": rng.standard_normal((4, 3)), "g": rng.standard_normal((1, 3)),
             "b": rng.standard_normal((1, 3))})


def _case_l2_normalize(rng):
    w = rng.standard_normal((3, 4))
    axis = int(rng.integers(2))
    return lambda n: _weighted(ag.l2_normalize(n["a"], axis=axis), w), {"a": rng.standard_normal((3, 4))}


def _case_cosine(rng):
    w = rng.standard_normal((3, 2))
    return (lambda n: _weighted(ag.cosine_similarity(n["a"], n["b"]), w),
            {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((2, 4))})


def _case_cosine_rowwise(rng):
    w = rng.standard_normal((3,))
    return (lambda n: _weighted(ag.cosine_similarity(n["a"], n["b"], pairwise=False), w),
            {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((3, 4))})


def _case_bce(rng):
    t = (rng.random((3, 4)) < 0.5).astype(float)
    return lambda n: ag.bce_with_targets(n["p"], t), {"p": rng.uniform(0.05, 0.95, size=(3, 4))}


PRIMITIVES: tuple[PrimitiveCase, ...] = tuple(PrimitiveCase(name, fn) for name, fn in (
    ("add", _case_add), ("sub", _case_sub), ("mul", _case_mul), ("scale", _case_scale),
    ("matmul", _case_matmul), ("transpose", _case_transpose), ("concat", _case_concat),
    ("take_rows", _case_take_rows), ("reshape", _case_reshape), ("sum", _case_sum),
    ("mean", _case_mean), ("leaky_relu", _case_leaky_relu), ("hinge", _case_hinge),
    ("sigmoid", _case_sigmoid), ("softmax", _case_softmax), ("layer_norm", _case_layer_norm),
    ("batch_norm", _case_batch_norm), ("l2_normalize", _case_l2_normalize),
    ("cosine_similarity", _case_cosine), ("cosine_rowwise", _case_cosine_rowwise),
    ("bce_with_targets", _case_bce),
))


def check_primitives(points: int = 10, seed: int = 0) -> dict[str, float]:
    """Worst relative error per primitive over ``points`` random inputs."""
    out = {}
    for k, case in enumerate(PRIMITIVES):
        worst = 0.0
        for p in range(points):
            f, point = case.make(np.random.default_rng([seed, k, p]))
            worst = max(worst, ag.gradient_check(f, point))
        out[case.name] = worst
    return out


SMALL_MODEL = ModelConfig(roi_dim=5, dim=6, geom_dim=3, score_dim=2, alpha_hidden=(7, 4),
                          cls_hidden=(6, 5, 4, 3), n_attrs=4)


@dataclass
class _Sample:
    roi_set: RoiSet
    attr_embeds: np.ndarray
    target: np.ndarray


def loss_problem(seed: int, cfg: ModelConfig = SMALL_MODEL, n_rois: int = 3, n_attrs: int = 2,
                 batch: int = 2):
    """A random small batch and parameter point for checking the full loss."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed=seed)
    # perturb away from the zero-bias / unit-gain init so every path is exercised
    for k, v in params.tensors.items():
        params.tensors[k] = v + 0.1 * rng.standard_normal(v.shape)
    samples, negs = [], []
    for b in range(batch):
        x1y1 = rng.uniform(0.0, 0.5, size=(n_rois, 2))
        boxes = np.hstack([x1y1, x1y1 + rng.uniform(0.1, 0.5, size=(n_rois, 2))])
        rs = RoiSet(f"g{b}", rng.standard_normal((n_rois, cfg.roi_dim)), rng.uniform(0, 1, n_rois), boxes)
        target = np.zeros(cfg.n_attrs)
        target[rng.choice(cfg.n_attrs, size=n_attrs, replace=False)] = 1.0
        samples.append(_Sample(rs, rng.standard_normal((n_attrs, cfg.dim)), target))
        negs.append(Negatives(np.argsort(rs.scores, kind="stable")[:max(1, n_rois // 2 + n_rois % 2)],
                              rng.standard_normal((n_attrs, cfg.dim))))
    return params, samples, negs


def check_total_loss(seed: int) -> float:
    params, samples, negs = loss_problem(seed)

    def f(nodes):
        return batch_loss(samples, negs, GraphParams(params, nodes), mode="train").node

    return ag.gradient_check(f, params.tensors)


def run_all(points: int = 10, seeds=range(10)) -> dict[str, float]:
    results = check_primitives(points)
    results["total_loss"] = max(check_total_loss(s) for s in seeds)
    return results
