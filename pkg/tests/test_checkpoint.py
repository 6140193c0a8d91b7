import struct

import numpy as np
import pytest

from conftest import TINY
from xattn.checkpoint import load_checkpoint, load_checkpoint_full, save_checkpoint
from xattn.errors import BadMagic, IoFailure, VersionUnsupported
from xattn.model import RoiSet, aggregate, classify_attributes, init_params, roi_weights, transform_roi
from xattn.optim import AdamState, adam_step


def trained_like(seed=0):
    p = init_params(TINY, seed=seed)
    rng = np.random.default_rng(seed)
    for k, v in p.tensors.items():
        p.tensors[k] = v + 0.1 * rng.standard_normal(v.shape)
    for k, v in p.buffers.items():
        p.buffers[k] = v + 0.1 * np.abs(rng.standard_normal(v.shape))
    p.stats_ready = True
    return p


def forward(p, rs):
    phi = transform_roi(rs, p)
    alpha = roi_weights(phi, p)
    return alpha.value, classify_attributes(aggregate(phi, alpha), p, mode="infer").value


def test_round_trip_forward_agrees(tmp_path):
    p = trained_like()
    path = tmp_path / "m.xatn"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    assert q.config == p.config and q.stats_ready
    rng = np.random.default_rng(1)
    rs = RoiSet("a", rng.standard_normal((4, TINY.roi_dim)), rng.uniform(0, 1, 4),
                [[0.1, 0.1, 0.4, 0.5]] * 4)
    for a, b in zip(forward(p, rs), forward(q, rs)):
        assert np.max(np.abs(a - b)) < 1e-6


def test_adam_state_round_trip(tmp_path):
    p = trained_like()
    st = AdamState()
    adam_step(p.tensors, {k: np.ones_like(v) for k, v in p.tensors.items()}, st)
    path = tmp_path / "m.xatn"
    save_checkpoint(p, path, st)
    _, st2 = load_checkpoint_full(path)
    assert st2.step == 1 and set(st2.m) == set(st.m)
    assert np.allclose(st2.v["roi.W"], st.v["roi.W"], rtol=1e-6)


def test_truncated_file_is_rejected(tmp_path):
    path = tmp_path / "m.xatn"
    save_checkpoint(trained_like(), path)
    data = path.read_bytes()
    for cut in (2, 10, len(data) // 2, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises((BadMagic, IoFailure)):
            load_checkpoint(path)


def test_wrong_magic(tmp_path):
    path = tmp_path / "m.xatn"
    path.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(BadMagic):
        load_checkpoint(path)


def test_newer_version_is_rejected(tmp_path):
    path = tmp_path / "m.xatn"
    save_checkpoint(trained_like(), path)
    data = bytearray(path.read_bytes())
    data[4:6] = struct.pack("<H", 2)
    path.write_bytes(bytes(data))
    with pytest.raises(VersionUnsupported):
        load_checkpoint(path)


def test_trailing_bytes_are_rejected(tmp_path):
    path = tmp_path / "m.xatn"
    save_checkpoint(trained_like(), path)
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(IoFailure):
        load_checkpoint(path)


def test_save_is_atomic_on_failure(tmp_path):
    path = tmp_path / "m.xatn"
    save_checkpoint(trained_like(0), path)
    before = path.read_bytes()
    bad = trained_like(1)
    bad.tensors["roi.W"] = object()  # cannot be serialized
    with pytest.raises(Exception):
        save_checkpoint(bad, path)
    assert path.read_bytes() == before
    assert [f.name for f in tmp_path.iterdir()] == ["m.xatn"]
