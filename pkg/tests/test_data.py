import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TINY, toy_table
from xattn.data import (SynthConfig, lift_matrix, load_dataset, read_annotations, read_rois, render_report,
                        synth_corpus, synth_generate, write_annotations, write_rois_bundle, write_rois_jsonl)
from xattn.embeddings import embed_attributes
from xattn.errors import FeatureDimMismatch, IdMismatch, IoFailure, ParseError, VersionUnsupported
from xattn.model import ModelConfig, RoiSet, init_params, roi_weights, transform_roi
from xattn.text import ATTRIBUTE_WORDS, Report, extract_attributes, load_vocabulary, write_reports


@pytest.fixture(scope="module")
def table():
    return toy_table(ATTRIBUTE_WORDS + ("lung",), dim=TINY.dim, seed=5)


def rois_line(image_id, feats):
    return json.dumps({"id": image_id, "rois": [{"feat": f, "score": 0.5, "box": [0, 0, 0.5, 0.5]}
                                                for f in feats]})


def write_pair(tmp_path, reports, roi_lines):
    write_reports(tmp_path / "r.jsonl", reports)
    (tmp_path / "rois.jsonl").write_text("\n".join(roi_lines) + "\n")
    return tmp_path / "r.jsonl", tmp_path / "rois.jsonl"


def test_minimal_join(tmp_path, table):
    feats = [[0.0] * TINY.roi_dim]
    r, x = write_pair(tmp_path, [Report("a", "Left pneumonia.")], [rois_line("a", feats)])
    ds = load_dataset(r, x, table)
    assert len(ds.samples) == 1 and ds.dropped == 0
    assert ds.samples[0].attrs.words(load_vocabulary()) == ["left"]


def test_report_without_attributes_is_dropped(tmp_path, table):
    feats = [[0.0] * TINY.roi_dim]
    r, x = write_pair(tmp_path, [Report("a", "Left pneumonia."), Report("b", "No pneumonia.")],
                      [rois_line("a", feats), rois_line("b", feats)])
    ds = load_dataset(r, x, table)
    assert len(ds.samples) == 1 and ds.dropped == 1 and "b" in ds.roi_sets


def test_mixed_feature_lengths(tmp_path, table):
    r, x = write_pair(tmp_path, [Report("a", "Left pneumonia.")], [rois_line("a", [[0.0], [0.0, 1.0]])])
    with pytest.raises(FeatureDimMismatch):
        load_dataset(r, x, table)


def test_feature_lengths_differ_across_images(tmp_path):
    (tmp_path / "x.jsonl").write_text(rois_line("a", [[0.0]]) + "\n" + rois_line("b", [[0.0, 1.0]]) + "\n")
    with pytest.raises(FeatureDimMismatch):
        read_rois(tmp_path / "x.jsonl")


def test_ids_must_join(tmp_path, table):
    r, x = write_pair(tmp_path, [Report("a", "Left pneumonia.")], [rois_line("b", [[0.0] * TINY.roi_dim])])
    with pytest.raises(IdMismatch):
        load_dataset(r, x, table)


def test_duplicate_roi_ids(tmp_path):
    (tmp_path / "x.jsonl").write_text(rois_line("a", [[0.0]]) + "\n" + rois_line("a", [[0.0]]) + "\n")
    with pytest.raises(IdMismatch):
        read_rois(tmp_path / "x.jsonl")


def test_bad_roi_record(tmp_path):
    (tmp_path / "x.jsonl").write_text('{"id": "a"}\n')
    with pytest.raises(ParseError):
        read_rois(tmp_path / "x.jsonl")


def random_sets(seed, n_images=4, dim=3):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_images):
        n = int(rng.integers(1, 6))
        xy = rng.uniform(0, 0.5, size=(n, 2))
        out.append(RoiSet(f"img{k}", rng.standard_normal((n, dim)) * 10 ** rng.uniform(-3, 3),
                          rng.uniform(0, 1, n), np.hstack([xy, xy + rng.uniform(0.01, 0.5, size=(n, 2))])))
    return out


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_bundle_round_trip_is_exact_in_float32(seed):
    import tempfile
    from pathlib import Path

    sets = random_sets(seed)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "x.bin"
        write_rois_bundle(path, sets)
        back = read_rois(path)
        write_rois_bundle(Path(d) / "y.bin", back)
        assert path.read_bytes() == (Path(d) / "y.bin").read_bytes()
    for a, b in zip(sets, back):
        assert a.image_id == b.image_id
        assert np.array_equal(a.feats.astype(np.float32), b.feats.astype(np.float32))
        assert np.array_equal(a.boxes.astype(np.float32), b.boxes.astype(np.float32))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_jsonl_round_trip_to_nine_digits(seed):
    import tempfile
    from pathlib import Path

    sets = random_sets(seed)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "x.jsonl"
        write_rois_jsonl(path, sets)
        back = read_rois(path)
    for a, b in zip(sets, back):
        assert np.allclose(a.feats, b.feats, rtol=1e-8, atol=0)
        assert np.allclose(a.scores, b.scores, rtol=1e-8, atol=0)


def test_bundle_bad_version_and_truncation(tmp_path):
    path = tmp_path / "x.bin"
    write_rois_bundle(path, random_sets(0))
    data = bytearray(path.read_bytes())
    path.write_bytes(bytes(data[:-3]))
    with pytest.raises(IoFailure):
        read_rois(path)
    data[4] = 9
    path.write_bytes(bytes(data))
    with pytest.raises(VersionUnsupported):
        read_rois(path)


def test_annotations_round_trip(tmp_path):
    gt = {"a": [[0.1, 0.2, 0.3, 0.4]], "b": [[0.0, 0.0, 1.0, 1.0], [0.2, 0.2, 0.5, 0.5]]}
    write_annotations(tmp_path / "g.jsonl", gt)
    assert read_annotations(tmp_path / "g.jsonl") == gt


# -------------------------------------------------------------- synthetic

def test_zero_noise_planted_feature_is_lifted_embedding(table):
    cfg = SynthConfig(num_images=3, rois_per_image=2, feat_dim=TINY.roi_dim, attrs_per_image=1,
                      noise_sigma=0.0, seed=1)
    samples, planted = synth_generate(cfg, table)
    lift = lift_matrix(cfg, table)
    for s in samples:
        want = (lift @ s.attr_embeds[0]).astype(np.float32).astype(np.float64)
        assert np.array_equal(s.roi_set.feats[planted[s.image_id].roi_index], want)


def test_synth_is_deterministic(table):
    cfg = SynthConfig(num_images=6, rois_per_image=4, feat_dim=TINY.roi_dim, seed=3)
    a, pa = synth_generate(cfg, table)
    b, pb = synth_generate(cfg, table)
    assert pa == pb
    for x, y in zip(a, b):
        assert np.array_equal(x.roi_set.feats, y.roi_set.feats) and x.attrs == y.attrs


def test_zero_noise_planted_roi_is_nearest_neighbour(table):
    cfg = SynthConfig(num_images=40, rois_per_image=8, feat_dim=TINY.roi_dim, noise_sigma=0.0, seed=2)
    samples, planted = synth_generate(cfg, table)
    lift = lift_matrix(cfg, table)
    for s in samples:
        target = lift @ s.attr_embeds.mean(axis=0)
        dist = np.linalg.norm(s.roi_set.feats - target, axis=1)
        assert int(np.argmin(dist)) == planted[s.image_id].roi_index


def test_planted_box_is_ground_truth_and_reports_round_trip(table):
    samples, planted = synth_generate(SynthConfig(num_images=10, rois_per_image=5, feat_dim=TINY.roi_dim,
                                                  seed=4), table)
    vocab = load_vocabulary()
    for s in samples:
        p = planted[s.image_id]
        assert s.roi_set.boxes[p.roi_index].tolist() == p.box
        assert extract_attributes(render_report(s.attrs.words(vocab))) == s.attrs
        assert np.array_equal(s.attr_embeds, embed_attributes(s.attrs, table))


def test_fresh_model_is_at_chance_on_planted(planted):
    samples, gt = planted
    rates = []
    for seed in range(30):
        p = init_params(ModelConfig(roi_dim=64, dim=256), seed=seed)
        hits = [int(np.argmax(roi_weights(transform_roi(s.roi_set, p), p).value)) == gt[s.image_id].roi_index
                for s in samples]
        rates.append(np.mean(hits))
    # individual seeds scatter widely; the average over initializations is the chance rate
    assert abs(np.mean(rates) - 1 / 20) < 0.025


def test_synth_corpus_mentions_every_attribute():
    text = " ".join(synth_corpus(300, seed=0)).lower()
    assert all(w in text.split() for w in ATTRIBUTE_WORDS)
    assert synth_corpus(5, seed=1) == synth_corpus(5, seed=1)
