"""Dataset files, joining, and the synthetic planted-correspondence generator."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embeddings import EmbeddingTable, embed_attributes
from .errors import FeatureDimMismatch, IdMismatch, IoFailure, ParseError, VersionUnsupported
from .io import atomic_write_bytes, atomic_write_text
from .model import RoiSet
from .text import (ATTRIBUTE_WORDS, DISEASE_TERMS, AttributeSet, AttributeVocabulary, Report,
                   extract_attributes, load_vocabulary, read_reports)
from .trainer import Sample

log = logging.getLogger(__name__)

ROI_MAGIC = b"XROI"
ROI_VERSION = 1


def _f9(x) -> float:
    return float(f"{float(x):.9g}")


# ------------------------------------------------------------------ ROI files

def write_rois_jsonl(path: str | Path, roi_sets: Iterable[RoiSet]) -> None:
    lines = []
    for rs in roi_sets:
        rois = [{"feat": [_f9(x) for x in f], "score": _f9(s), "box": [_f9(x) for x in b]}
                for f, s, b in zip(rs.feats, rs.scores, rs.boxes)]
        lines.append(json.dumps({"id": rs.image_id, "rois": rois}))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def write_rois_bundle(path: str | Path, roi_sets: Sequence[RoiSet]) -> None:
    dims = {rs.roi_dim for rs in roi_sets}
    if len(dims) > 1:
        raise FeatureDimMismatch(f"mixed feature lengths {sorted(dims)}")
    dim = dims.pop() if dims else 0
    parts = [ROI_MAGIC, struct.pack("<HII", ROI_VERSION, len(roi_sets), dim)]
    for rs in roi_sets:
        raw = rs.image_id.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<I", len(rs)))
        for arr in (rs.feats, rs.scores, rs.boxes):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def _read_bundle(path, data: bytes) -> list[RoiSet]:
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise IoFailure(f"{path}: ROI bundle truncated")
        out = data[pos:pos + n]
        pos += n
        return out

    version, n_images, dim = struct.unpack("<HII", take(10))
    if version != ROI_VERSION:
        raise VersionUnsupported(f"{path}: ROI bundle version {version}")
    out = []
    for _ in range(n_images):
        (nlen,) = struct.unpack("<H", take(2))
        image_id = take(nlen).decode("utf-8")
        (n,) = struct.unpack("<I", take(4))
        feats = np.frombuffer(take(4 * n * dim), dtype="<f4").reshape(n, dim)
        scores = np.frombuffer(take(4 * n), dtype="<f4")
        boxes = np.frombuffer(take(16 * n), dtype="<f4").reshape(n, 4)
        out.append(RoiSet(image_id, feats, scores, boxes))
    return out


def read_rois(path: str | Path) -> list[RoiSet]:
    """Read ROI sets from a JSONL file or an XROI binary bundle (sniffed by magic)."""
    data = Path(path).read_bytes()
    if data[:4] == ROI_MAGIC:
        sets = _read_bundle(path, data)
    else:
        sets = []
        for lineno, line in enumerate(data.decode("utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rois = rec["rois"]
                feats = [r["feat"] for r in rois]
                if len({len(f) for f in feats}) > 1:
                    raise FeatureDimMismatch(f"{path}:{lineno}: mixed feature lengths")
                rs = RoiSet(str(rec["id"]), np.array(feats, dtype=np.float64),
                            [r["score"] for r in rois], [r["box"] for r in rois])
            except FeatureDimMismatch:
                raise
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(path, lineno, str(exc)) from None
            sets.append(rs)
    dims = {rs.roi_dim for rs in sets}
    if len(dims) > 1:
        raise FeatureDimMismatch(f"{path}: feature lengths {sorted(dims)} differ across images")
    ids = [rs.image_id for rs in sets]
    if len(set(ids)) != len(ids):
        raise IdMismatch(next(i for i in ids if ids.count(i) > 1), "duplicate image id in ROI file")
    return sets


def write_annotations(path: str | Path, gt: dict[str, list[list[float]]]) -> None:
    lines = [json.dumps({"id": k, "boxes": [[_f9(x) for x in b] for b in v]}) for k, v in gt.items()]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_annotations(path: str | Path) -> dict[str, list[list[float]]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[str(rec["id"])] = [[float(x) for x in b[:4]] for b in rec["boxes"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(path, lineno, str(exc)) from None
    return out


# ------------------------------------------------------------------- joining

def make_sample(roi_set: RoiSet, attrs: AttributeSet, table: EmbeddingTable,
                vocab: AttributeVocabulary | None = None) -> Sample:
    vocab = vocab or load_vocabulary()
    return Sample(roi_set.image_id, roi_set, attrs, embed_attributes(attrs, table, vocab),
                  np.array(attrs.target(len(vocab)), dtype=np.float64))


@dataclass
class Dataset:
    samples: list[Sample]
    ground_truth: dict[str, list[list[float]]] = field(default_factory=dict)
    dropped: int = 0
    reports: dict[str, Report] = field(default_factory=dict)
    roi_sets: dict[str, RoiSet] = field(default_factory=dict)


def load_dataset(reports_path, rois_path, table: EmbeddingTable, annotations_path=None,
                 vocab: AttributeVocabulary | None = None,
                 disease_terms: Iterable[str] = DISEASE_TERMS) -> Dataset:
    """Join reports, extracted attributes and ROI sets by image id.

    Images whose report yields no attributes are dropped (and counted);
    their ROI sets stay available in ``Dataset.roi_sets`` for inference.
    """
    vocab = vocab or load_vocabulary()
    reports = {r.id: r for r in read_reports(reports_path)}
    roi_sets = {rs.image_id: rs for rs in read_rois(rois_path)}
    for rid in reports:
        if rid not in roi_sets:
            raise IdMismatch(rid, "report has no ROI record")
    for iid in roi_sets:
        if iid not in reports:
            raise IdMismatch(iid, "ROI record has no report")
    gt = {}
    if annotations_path is not None:
        gt = read_annotations(annotations_path)
        for iid in gt:
            if iid not in roi_sets:
                raise IdMismatch(iid, "annotation has no ROI record")
    samples, dropped = [], 0
    for rid, rep in reports.items():
        attrs = extract_attributes(rep, vocab, disease_terms)
        if len(attrs) == 0:
            dropped += 1
            continue
        samples.append(make_sample(roi_sets[rid], attrs, table, vocab))
    if dropped:
        log.info("dropped %d image(s) without extracted attributes", dropped)
    return Dataset(samples, gt, dropped, reports, roi_sets)


# ----------------------------------------------------------------- synthetic

@dataclass
class SynthConfig:
    num_images: int = 200
    rois_per_image: int = 20
    feat_dim: int = 64
    attrs_per_image: int = 2
    noise_sigma: float = 0.1
    seed: int = 7
    background_prototypes: int = 4
    background_sigma: float = 0.3

    def __post_init__(self):
        if min(self.num_images, self.rois_per_image, self.feat_dim, self.attrs_per_image) < 1:
            raise ValueError("synthetic sizes must be positive")
        if self.noise_sigma < 0 or self.background_sigma < 0:
            raise ValueError("noise levels must be >= 0")
        if self.background_prototypes < 1:
            raise ValueError("need at least one background prototype")
        if self.attrs_per_image > len(ATTRIBUTE_WORDS):
            raise ValueError("more attributes per image than vocabulary words")


def lift_matrix(cfg: SynthConfig, table: EmbeddingTable, vocab: AttributeVocabulary | None = None) -> np.ndarray:
    """Fixed (feat_dim, table.dim) map from embedding space to ROI-feature space.

    A seeded Gaussian matrix applied after projecting out the direction
    shared by all attribute vectors (it carries no label information),
    scaled so lifted attribute vectors have unit RMS per coordinate on
    average (matching the background ROIs).
    """
    vocab = vocab or load_vocabulary()
    g = np.random.default_rng([cfg.seed, 1]).standard_normal((cfg.feat_dim, table.dim))
    words = np.stack([table.vector(w) for w in vocab.words])
    u = words.mean(axis=0)
    if np.linalg.norm(u) > 0:
        u = u / np.linalg.norm(u)
        g = g - np.outer(g @ u, u)
    rms = np.sqrt(np.mean((words @ g.T) ** 2))
    return g / rms if rms > 0 else g


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _random_box(rng) -> np.ndarray:
    w, h = rng.uniform(0.15, 0.4, size=2)
    x1, y1 = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
    return np.array([x1, y1, x1 + w, y1 + h])


def _box_iou(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def render_report(words: Sequence[str]) -> str:
    return f"{' '.join(words).capitalize()} opacity consistent with pneumonia."


@dataclass
class PlantedRoi:
    roi_index: int
    box: list[float]


def synth_generate(cfg: SynthConfig, table: EmbeddingTable,
                   vocab: AttributeVocabulary | None = None) -> tuple[list[Sample], dict[str, PlantedRoi]]:
    """Images where exactly one ROI carries the report's attribute signal.

    Per image: ``attrs_per_image`` random attributes; the planted ROI's
    feature is the lifted mean attribute embedding plus N(0, sigma^2) noise,
    with a detector score in U(0.4, 1).  Every other ROI is background: one
    of a few dataset-wide N(0, I) prototypes (recurring normal anatomy) plus
    N(0, background_sigma^2) noise, scored in U(0, 0.6), with a box
    overlapping the planted one by IoU < 0.3.  All values are rounded to
    float32 so files round-trip.
    """
    vocab = vocab or load_vocabulary()
    lift = lift_matrix(cfg, table, vocab)
    rng = np.random.default_rng([cfg.seed, 0])
    n, d = cfg.rois_per_image, cfg.feat_dim
    prototypes = np.random.default_rng([cfg.seed, 2]).standard_normal((cfg.background_prototypes, d))
    samples, planted = [], {}
    width = len(str(cfg.num_images - 1))
    for k in range(cfg.num_images):
        image_id = f"synth{k:0{width}d}"
        idx = np.sort(rng.choice(len(vocab), size=cfg.attrs_per_image, replace=False))
        attrs = AttributeSet(frozenset(int(i) for i in idx))
        embeds = embed_attributes(attrs, table, vocab)
        p = int(rng.integers(n))
        feats = prototypes[rng.integers(len(prototypes), size=n)]
        feats = feats + cfg.background_sigma * rng.standard_normal((n, d))
        feats[p] = lift @ embeds.mean(axis=0) + cfg.noise_sigma * rng.standard_normal(d)
        scores = rng.uniform(0.0, 0.6, size=n)
        scores[p] = rng.uniform(0.4, 1.0)
        boxes = np.empty((n, 4))
        boxes[p] = _random_box(rng)
        for i in range(n):
            if i == p:
                continue
            box = _random_box(rng)
            while _box_iou(box, boxes[p]) >= 0.3:
                box = _random_box(rng)
            boxes[i] = box
        roi_set = RoiSet(image_id, _f32(feats), _f32(scores), _f32(boxes))
        samples.append(make_sample(roi_set, attrs, table, vocab))
        planted[image_id] = PlantedRoi(p, roi_set.boxes[p].tolist())
    return samples, planted


_FILLER = ("the", "patient", "chest", "radiograph", "shows", "in", "with", "and", "of", "is",
           "seen", "there", "lung", "lobe", "zone", "findings", "compared", "prior", "study")
_DISEASE = ("pneumonia", "opacity", "consolidation", "infiltrate")


def synth_corpus(num_reports: int = 3000, seed: int = 0) -> list[str]:
    """Templated report texts for training embeddings when no real corpus is at hand.

    Each attribute word gets two private companion words so attribute vectors
    separate in embedding space; sentences mix in shared filler and disease
    terms, plus some negated sentences.
    """
    rng = np.random.default_rng(seed)
    companions = {w: (f"{w}x", f"{w}y") for w in ATTRIBUTE_WORDS}
    texts = []
    for _ in range(num_reports):
        sents = []
        for _ in range(int(rng.integers(1, 4))):
            k = int(rng.integers(1, 4))
            words = list(rng.choice(ATTRIBUTE_WORDS, size=k, replace=False))
            toks = []
            for w in words:
                toks.extend([str(rng.choice(companions[w])), w])
            toks.insert(int(rng.integers(len(toks) + 1)), str(rng.choice(_DISEASE)))
            toks.extend(rng.choice(_FILLER, size=int(rng.integers(2, 6))).tolist())
            if rng.random() < 0.15:
                toks = ["no"] + toks
            sents.append(" ".join(toks) + ".")
        texts.append(" ".join(sents))
    return texts
