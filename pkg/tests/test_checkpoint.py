import json
import struct

import numpy as np
import pytest

from mddaformer.checkpoint import MAGIC, load_checkpoint, read_checkpoint, save_checkpoint
from mddaformer.errors import CheckpointError
from mddaformer.network import ModelConfig, build_model
from mddaformer.train import OptState, adamw_step


@pytest.fixture
def trained(rng):
    m = build_model(ModelConfig.tiny(stage_types="TCT"), seed=2)
    opt = OptState(weight_decay=0.05)
    named = list(m.named_parameters())
    for _ in range(2):
        adamw_step(named, [rng.normal(size=p.shape).astype(np.float32) for _, p in named], opt, 1e-3)
    return m, opt


def test_roundtrip_bit_identical(tmp_path, trained):
    m, opt = trained
    save_checkpoint(m, opt, tmp_path / "a.ckpt")
    m2, opt2 = load_checkpoint(tmp_path / "a.ckpt")
    assert m2.cfg == m.cfg
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    assert opt2.scalars() == opt.scalars()
    for n in opt.m:
        assert np.array_equal(opt.m[n], opt2.m[n]) and np.array_equal(opt.v[n], opt2.v[n])
    save_checkpoint(m2, opt2, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_without_optimizer(tmp_path, trained):
    save_checkpoint(trained[0], None, tmp_path / "m.ckpt")
    _, opt = load_checkpoint(tmp_path / "m.ckpt")
    assert opt is None


def test_layout(tmp_path, trained):
    save_checkpoint(trained[0], None, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    n = sum(int(np.prod(e["shape"])) for e in header["manifest"])
    assert len(raw) == 16 + hlen + 4 * n
    assert not list(tmp_path.glob("*.tmp"))


def rewrite(path, mutate_header=None, tail=b"", cut=0):
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    body = raw[16 + hlen:]
    if mutate_header:
        mutate_header(header)
    blob = json.dumps(header).encode()
    out = raw[:8] + struct.pack("<Q", len(blob)) + blob + body + tail
    path.write_bytes(out[:len(out) - cut] if cut else out)


@pytest.mark.parametrize("damage,msg", [
    (lambda p: p.write_bytes(b"NOTACKPT" + p.read_bytes()[8:]), "magic"),
    (lambda p: p.write_bytes(b"MDDAFRM9" + p.read_bytes()[8:]), "version"),
    (lambda p: rewrite(p, cut=10), "truncated"),
    (lambda p: rewrite(p, tail=b"\0\0\0\0"), "trailing"),
    (lambda p: rewrite(p, lambda h: h.update(format_version=2)), "version"),
    (lambda p: rewrite(p, lambda h: h["manifest"].pop(0), tail=b""), "missing|trailing"),
])
def test_damaged_files(tmp_path, trained, damage, msg):
    p = tmp_path / "m.ckpt"
    save_checkpoint(trained[0], None, p)
    damage(p)
    with pytest.raises(CheckpointError, match=msg):
        load_checkpoint(p)


def test_shape_mismatch_names_entry(tmp_path, trained):
    p = tmp_path / "m.ckpt"
    save_checkpoint(trained[0], None, p)
    header, _ = read_checkpoint(p)
    name = header["manifest"][0]["name"]

    def reshape_first(h):
        h["manifest"][0]["shape"] = [int(np.prod(h["manifest"][0]["shape"]))]
    rewrite(p, reshape_first)
    with pytest.raises(CheckpointError, match=name.replace(".", r"\.")):
        load_checkpoint(p)


def test_config_mismatch(tmp_path, trained):
    p = tmp_path / "m.ckpt"
    save_checkpoint(trained[0], None, p)
    rewrite(p, lambda h: h["model_config"].update(base_dim=10))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
