import json
import struct

import numpy as np
import pytest

from dynamixer.checkpoint import MAGIC, load_checkpoint, read_header, save_checkpoint
from dynamixer.config import GenKind, TrainConfig, model_preset
from dynamixer.data import synth_dataset
from dynamixer.errors import CheckpointError
from dynamixer.mixer import build_model, named_parameters
from dynamixer.train import evaluate, init_optimizer

from conftest import scramble


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_roundtrip_byte_exact(tmp_path, rng, dtype):
    cfg = model_preset("tiny")
    weights = scramble(build_model(cfg, dtype=dtype), rng)
    for _, t in named_parameters(weights):
        t.data = t.data.astype(dtype)
    named = list(named_parameters(weights))
    opt = init_optimizer(named)
    opt.step = 7
    for n, _ in named:
        opt.m[n] += rng.standard_normal(opt.m[n].shape).astype(dtype)
    a = save_checkpoint(tmp_path / "a.ckpt", weights, cfg, TrainConfig(), opt, {"epoch": 3, "step": 7})
    ck = load_checkpoint(a)
    b = save_checkpoint(tmp_path / "b.ckpt", ck.weights, ck.config, ck.train_config, ck.optimizer, ck.state)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for (n, t), (_, u) in zip(named, named_parameters(ck.weights)):
        assert t.data.tobytes() == u.data.tobytes(), n
    assert ck.optimizer.step == 7 and ck.state == {"epoch": 3, "step": 7}
    assert ck.config == cfg


def test_evaluate_bit_identical_after_reload(tmp_path, rng):
    cfg = model_preset("tiny")
    weights = scramble(build_model(cfg), rng)
    ds = synth_dataset(100, 4, 10, seed=0)
    from dynamixer.checkpoint import Checkpoint

    before = evaluate(Checkpoint(cfg, weights), ds)
    path = save_checkpoint(tmp_path / "m.ckpt", weights, cfg)
    assert evaluate(path, ds) == before


def test_layout(tmp_path):
    cfg = model_preset("tiny")
    path = save_checkpoint(tmp_path / "m.ckpt", build_model(cfg), cfg)
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    (size,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + size])
    assert header["dtype"] == "<f8"
    entry = header["manifest"]["head.bias"]
    assert entry["shape"] == [10]
    assert len(raw) == 16 + size + 8 * 6274
    assert read_header(path)[0] == header


def rewrite_header(path, edit):
    header, start = read_header(path)
    payload = open(path, "rb").read()[start:]
    edit(header)
    head = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<Q", len(head)) + head + payload)


def test_shape_mismatch_names_tensor(tmp_path):
    cfg = model_preset("tiny")
    path = save_checkpoint(tmp_path / "m.ckpt", build_model(cfg), cfg)
    rewrite_header(path, lambda h: h["manifest"]["head.weight"].__setitem__("shape", [16, 9]))
    with pytest.raises(CheckpointError, match="head.weight"):
        load_checkpoint(path)


def test_config_echo_mismatch(tmp_path):
    cfg = model_preset("tiny")
    path = save_checkpoint(tmp_path / "m.ckpt", build_model(cfg), cfg)
    rewrite_header(path, lambda h: h["config"].__setitem__("reduced_dim", 2))
    with pytest.raises(CheckpointError, match="row_op.reduce"):
        load_checkpoint(path)


def test_missing_and_extra_tensors(tmp_path):
    cfg = model_preset("tiny")
    path = save_checkpoint(tmp_path / "m.ckpt", build_model(cfg), cfg)
    rewrite_header(path, lambda h: h["manifest"].pop("final_ln.gain"))
    with pytest.raises(CheckpointError, match="missing tensor final_ln.gain"):
        load_checkpoint(path)
    path = save_checkpoint(tmp_path / "n.ckpt", build_model(cfg), cfg)
    rewrite_header(path, lambda h: h["manifest"].__setitem__("ghost", {"shape": [1], "offset": 0}))
    with pytest.raises(CheckpointError, match="unexpected tensor ghost"):
        load_checkpoint(path)


def test_bad_magic_and_truncation(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(tmp_path / "x.ckpt")
    cfg = model_preset("tiny")
    path = save_checkpoint(tmp_path / "m.ckpt", build_model(cfg), cfg)
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[:-100])
    with pytest.raises(CheckpointError, match="past end"):
        load_checkpoint(path)


def test_ablated_and_shared_models_roundtrip(tmp_path):
    for flags in ({"share_row_col_op": True}, {"disable_col": True}, {"gen_kind": GenKind.STATIC_RANDOM}):
        cfg = model_preset("tiny").replace(**flags)
        path = save_checkpoint(tmp_path / "m.ckpt", build_model(cfg), cfg)
        ck = load_checkpoint(path)
        block = ck.weights.stages[0].layers[0].block
        if flags.get("share_row_col_op"):
            assert block.row_op is block.col_op
