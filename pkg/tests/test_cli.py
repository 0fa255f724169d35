import json
import os
import subprocess
import sys

import numpy as np
import pytest

from dynamixer.checkpoint import save_checkpoint
from dynamixer.cli import main
from dynamixer.config import GenKind, model_preset, preset
from dynamixer.mixer import build_model
from dynamixer.tensor import get_default_dtype, set_default_dtype

from conftest import scramble


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_analyze_csv_and_json(capsys):
    code, out, _ = run(capsys, "analyze", "--preset", "dynamixer-s")
    assert code == 0
    total = out.strip().splitlines()[-1].split(",")
    assert total[0] == "total" and abs(int(total[1]) / 26e6 - 1) < 0.03 and abs(int(total[2]) / 7.3e9 - 1) < 0.1
    code, out, _ = run(capsys, "analyze", "--preset", "tiny", "--format", "json")
    assert code == 0 and json.loads(out)["total"] == {"params": 6274, "macs": 50720}


def test_analyze_bad_config(tmp_path, capsys):
    path = tmp_path / "c.json"
    doc = preset("tiny").to_dict()
    doc["model"]["stages"][0]["widht"] = 3
    path.write_text(json.dumps(doc))
    code, out, err = run(capsys, "analyze", "--config", str(path))
    assert code == 2 and out == ""
    assert "model.stages[0].widht" in err
    path.write_text("[1, 2")
    assert run(capsys, "analyze", "--config", str(path))[:2] == (2, "")
    assert run(capsys, "analyze", "--config", str(tmp_path / "missing.json"))[:2] == (2, "")
    assert run(capsys, "analyze")[0] == 2  # neither --config nor --preset


def test_gradcheck_default_and_determinism(capsys):
    code, out, _ = run(capsys, "gradcheck", "--samples", "200")
    assert code == 0
    err = float(out.split(":")[1].split()[0])
    assert err < 1e-4
    assert run(capsys, "gradcheck", "--samples", "200")[1] == out


def test_gradcheck_eps_below_noise_floor(capsys):
    code, _, err = run(capsys, "gradcheck", "--eps", "1e-12", "--samples", "50")
    assert code != 0
    assert "noise floor" in err


def test_gradcheck_refuses_32bit(capsys):
    old = get_default_dtype()
    set_default_dtype(np.float32)
    try:
        code, out, err = run(capsys, "gradcheck")
    finally:
        set_default_dtype(old)
    assert code == 3 and "gradcheck requires 64-bit mode" in err


def test_gradcheck_32bit_env_subprocess():
    env = dict(os.environ, DYNAMIXER_FLOAT="32")
    proc = subprocess.run([sys.executable, "-m", "dynamixer.cli", "gradcheck"], env=env, capture_output=True, text=True)
    assert proc.returncode == 3
    assert "gradcheck requires 64-bit mode" in proc.stderr


def test_train_eval_roundtrip(tmp_path, capsys):
    cfg_path = tmp_path / "run.json"
    doc = preset("tiny").to_dict()
    doc["train"]["epochs"] = 2
    doc["data"]["n_train"] = 256
    doc["data"]["n_val"] = 100
    cfg_path.write_text(json.dumps(doc))
    out_dir = tmp_path / "out"
    code, out, _ = run(capsys, "train", "--config", str(cfg_path), "--out", str(out_dir), "--deterministic", "--quiet")
    assert code == 0
    assert (out_dir / "metrics.csv").exists() and (out_dir / "checkpoints" / "final.ckpt").exists()
    logged = [l for l in (out_dir / "metrics.csv").read_text().splitlines() if l.split(",")[4]][-1].split(",")[4]
    code, out, _ = run(capsys, "eval", "--checkpoint", str(out_dir / "checkpoints" / "final.ckpt"),
                       "--config", str(cfg_path))
    assert code == 0
    assert float(out.split(":")[1]) == float(logged)


def test_train_missing_data_exit_4(tmp_path, capsys):
    code, out, err = run(capsys, "train", "--preset", "tiny", "--data", "cifar10", "--data-dir",
                         str(tmp_path / "nope"), "--out", str(tmp_path / "o"))
    assert code == 4 and "nope" in err


def test_eval_missing_checkpoint_exit_4(tmp_path, capsys):
    assert run(capsys, "eval", "--checkpoint", str(tmp_path / "none.ckpt"))[0] == 4


def test_bench_prints_rate(capsys):
    code, out, _ = run(capsys, "bench", "--preset", "tiny", "--batch", "4", "--duration", "0.2")
    assert code == 0
    assert float(out.split()[1]) > 0


def make_ckpt(tmp_path, rng, kind=GenKind.DYNAMIC):
    cfg = model_preset("tiny").replace(gen_kind=kind)
    weights = scramble(build_model(cfg), rng)
    return save_checkpoint(tmp_path / f"{kind.value}.ckpt", weights, cfg)


def export(capsys, tmp_path, ckpt, image, *extra):
    np.save(tmp_path / "in.npy", image)
    out = tmp_path / "p.csv"
    code, _, err = run(capsys, "export-mixing", "--checkpoint", str(ckpt), "--input", str(tmp_path / "in.npy"),
                       "--out", str(out), *extra)
    return code, (np.loadtxt(out, delimiter=",") if code == 0 else err)


def test_export_rows_sum_to_one_and_depend_on_input(tmp_path, rng, capsys):
    ckpt = make_ckpt(tmp_path, rng)
    a = rng.standard_normal((3, 32, 32))
    b = rng.standard_normal((1, 3, 32, 32))
    code, pa = export(capsys, tmp_path, ckpt, a, "--layer", "0", "--direction", "row", "--segment", "1")
    assert code == 0 and pa.shape == (4, 4)
    np.testing.assert_allclose(pa.sum(axis=1), 1, atol=1e-6)
    _, pb = export(capsys, tmp_path, ckpt, b, "--layer", "0", "--direction", "row", "--segment", "1")
    assert np.abs(pa - pb).max() > 1e-6
    code, pc = export(capsys, tmp_path, ckpt, a, "--layer", "1", "--direction", "col", "--index", "1")
    assert code == 0 and pc.shape == (2, 2)


def test_export_static_is_input_independent(tmp_path, rng, capsys):
    ckpt = make_ckpt(tmp_path, rng, GenKind.STATIC_RANDOM)
    _, pa = export(capsys, tmp_path, ckpt, rng.standard_normal((3, 32, 32)), "--layer", "0", "--direction", "col")
    _, pb = export(capsys, tmp_path, ckpt, rng.standard_normal((3, 32, 32)), "--layer", "0", "--direction", "col")
    np.testing.assert_array_equal(pa, pb)


@pytest.mark.parametrize("extra", [("--layer", "2"), ("--layer", "0", "--segment", "2"), ("--layer", "-1"),
                                   ("--layer", "0", "--index", "4")])
def test_export_out_of_range_exit_2(tmp_path, rng, capsys, extra):
    ckpt = make_ckpt(tmp_path, rng)
    code, _ = export(capsys, tmp_path, ckpt, rng.standard_normal((3, 32, 32)), "--direction", "row", *extra)
    assert code == 2


def test_export_bad_input_exit_4(tmp_path, rng, capsys):
    ckpt = make_ckpt(tmp_path, rng)
    code, _ = export(capsys, tmp_path, ckpt, rng.standard_normal((3, 16, 16)), "--layer", "0", "--direction", "row")
    assert code == 4


def test_unknown_subcommand_exit_2(capsys):
    assert main(["fly"]) == 2
