import csv
import importlib
import json
import struct
import zlib
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dqnet.autograd import Tensor
from dqnet.checks import tiny_model_config
from dqnet.data import gen_synthetic, save_dataset
from dqnet.errors import ConfigError
from dqnet.harness import cli
from dqnet.fusion import FUSION_MODES
from dqnet.harness.ablate import HELD_OUT_OFFSET, ablate, variant
from dqnet.harness.checkpoint import CheckpointError, decode, encode, load_checkpoint, save_checkpoint
from dqnet.harness.config import TrainConfig, build, diff, from_dict, load_config, parse_text, to_dict
from dqnet.harness.optim import AdamW, layer_decay_scales, poly_lr
from dqnet.harness.train import (
    ConfigMismatch,
    TrainingDiverged,
    evaluate,
    evaluate_samples,
    model_from_checkpoint,
    train,
)
from dqnet.model import DQNet

train_mod = importlib.import_module("dqnet.harness.train")

SMOKE = {"max_steps": 3, "batch_size": 2, "n_train": 4}


def smoke_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(model=tiny_model_config(), **{**SMOKE, **overrides})
    return replace(cfg, loss=replace(cfg.loss, k=5))


@pytest.fixture(scope="module")
def scenes():
    return gen_synthetic(smoke_config().synth(), 4)


# -- schedule and optimiser -------------------------------------------------------------
def test_poly_lr_values():
    assert poly_lr(0, 100, 0.1) == 0.1
    assert poly_lr(50, 100, 0.1, 1.0) == pytest.approx(0.05)
    assert poly_lr(100, 100, 0.1) == 0.0 and poly_lr(150, 100, 0.1) == 0.0


@given(max_steps=st.integers(1, 500), power=st.floats(0.1, 3.0))
def test_poly_lr_monotone(max_steps, power):
    values = [poly_lr(s, max_steps, 1.0, power) for s in range(max_steps + 1)]
    assert all(a >= b for a, b in zip(values, values[1:])) and values[-1] == 0.0


def test_adamw_zero_lr_leaves_parameters_bit_identical(rng):
    model = DQNet(tiny_model_config(), seed=0)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    opt = AdamW(list(model.named_parameters()))
    for p in model.parameters():
        p.grad = rng.standard_normal(p.shape).astype(p.dtype)
    opt.step(0.0)
    for k, v in model.state_dict().items():
        assert np.array_equal(v, before[k]), k


def test_adamw_first_step_by_hand():
    w = Tensor(np.array([[2.0, -1.0]]), requires_grad=True)
    b = Tensor(np.array([0.5]), requires_grad=True)
    w.grad, b.grad = np.array([[0.3, -4.0]]), np.array([2.0])
    AdamW([("w", w), ("b", b)], eps=1e-8, weight_decay=0.1).step(0.01)
    # bias-corrected first step moves each coordinate by lr * g / (|g| + eps); only the matrix decays
    decayed = np.array([[2.0, -1.0]]) * (1 - 0.01 * 0.1)
    np.testing.assert_allclose(w.data, decayed - 0.01 * np.array([[0.3 / (0.3 + 1e-8), -4.0 / (4.0 + 1e-8)]]), rtol=1e-12)
    np.testing.assert_allclose(b.data, [0.5 - 0.01 * 2.0 / (2.0 + 1e-8)], rtol=1e-12)


def test_layer_decay_scales_by_depth():
    model = DQNet(tiny_model_config(), seed=0)
    scales = layer_decay_scales(model, 0.5)
    assert scales["vit.pos"] == 0.5  # depth 1: embeddings one level below the only block
    assert scales["vit.layers.0.fc1.weight"] == 1.0
    assert layer_decay_scales(model, None) == {}


# -- configuration -------------------------------------------------------------------------
def test_parse_text_comments_and_errors():
    assert parse_text("# header\nlr = 0.5  # trailing\n\nseed=3\n") == {"lr": "0.5", "seed": "3"}
    with pytest.raises(ConfigError, match="unknown key"):
        parse_text("learning_rate = 1")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_text("lr = 1\nlr = 2")
    with pytest.raises(ConfigError, match="expected"):
        parse_text("lr 1")


def test_max_steps_is_required():
    with pytest.raises(ConfigError, match="max_steps"):
        build({"lr": "0.1"})


def test_build_maps_keys_and_window_full():
    cfg = build(parse_text("max_steps = 5\nimage_size = 64\npatch_size = 8\nwindow = full\nstages = 35\nsal_beta = 1.5"))
    assert cfg.model.window == 8 and cfg.model.stages == (3, 5) and cfg.loss.beta == 1.5


def test_bad_value_is_config_error():
    with pytest.raises(ConfigError):
        build(parse_text("max_steps = 5\naugment = maybe"))


def test_dict_roundtrip_and_diff():
    cfg = smoke_config(layer_decay=0.75)
    again = from_dict(json.loads(json.dumps(to_dict(cfg))))
    assert again == cfg
    changes = diff(to_dict(cfg), to_dict(replace(cfg, lr=0.5)))
    assert changes == ["lr: 0.001 != 0.5"]


def test_shipped_configs_parse():
    from pathlib import Path

    for path in sorted((Path(__file__).parents[1] / "configs").glob("*.cfg")):
        load_config(path)


# -- checkpoint ----------------------------------------------------------------------------
def test_checkpoint_byte_layout():
    a = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
    b = np.array([0.5], dtype=np.float64)
    body = b"DQNT" + struct.pack("<II", 1, 2)
    body += struct.pack("<H", 1) + b"a" + struct.pack("<BB", 0, 2) + struct.pack("<II", 1, 3) + a.tobytes()
    body += struct.pack("<H", 2) + b"bb" + struct.pack("<BB", 1, 1) + struct.pack("<I", 1) + b.tobytes()
    expect = body + struct.pack("<I", zlib.crc32(body))
    assert encode({"a": a, "bb": b}) == expect


def test_checkpoint_roundtrip_with_metadata():
    blob = encode({"x": np.arange(6, dtype=np.float64).reshape(2, 3)}, {"step": 7, "config": {"lr": 0.1}})
    ck = decode(blob)
    assert ck.step == 7 and ck.config == {"lr": 0.1}
    np.testing.assert_array_equal(ck.tensors["x"], np.arange(6).reshape(2, 3))


def test_checkpoint_rejects_damage(tmp_path):
    path = save_checkpoint(tmp_path / "c.dqnt", {"x": np.ones(4, np.float32)}, {"step": 1})
    blob = path.read_bytes()
    with pytest.raises(CheckpointError, match="checksum"):
        decode(blob[:-6] + blob[-4:])  # truncated payload
    flipped = bytearray(blob)
    flipped[20] ^= 0x01
    with pytest.raises(CheckpointError, match="checksum"):
        decode(bytes(flipped))
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        decode(blob[:10])


def test_checkpoint_rejects_integer_tensors():
    with pytest.raises(CheckpointError):
        encode({"i": np.arange(3)})


# -- training ------------------------------------------------------------------------------
def test_training_is_deterministic_per_seed(scenes):
    a = train(smoke_config(), scenes)
    b = train(smoke_config(), scenes)
    assert a.log == b.log
    for (k, va), (_, vb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert np.array_equal(va, vb), k
    c = train(smoke_config(seed=1), scenes)
    assert c.log[0]["batch"] != a.log[0]["batch"] or c.log[0]["l_total"] != a.log[0]["l_total"]


def test_training_outputs(tmp_path, scenes):
    result = train(smoke_config(checkpoint_every=2), scenes, tmp_path)
    with open(tmp_path / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["step"]) for r in rows] == [0, 1, 2]
    assert list(rows[0]) == list(train_mod.LOG_FIELDS)
    assert (tmp_path / "step_000002.dqnt").exists()
    assert load_checkpoint(result.checkpoint).step == 3
    for r in rows:
        parts = float(r["l_bce_w"]) + float(r["l_iou_w"]) + float(r["l_sal"])
        assert abs(parts - float(r["l_total"])) < 1e-5


def test_loss_decreases_on_a_fixed_batch(scenes):
    result = train(smoke_config(max_steps=30, augment=False, lr=3e-3, batch_size=4), scenes)
    assert result.log[-1]["l_total"] < result.log[0]["l_total"]


def test_divergence_saves_last_good_state(tmp_path, scenes, monkeypatch):
    real = train_mod.total_loss
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        out = real(*args, **kwargs)
        calls["n"] += 1
        if calls["n"] == 2:
            out.total = out.total * float("nan")
        return out

    monkeypatch.setattr(train_mod, "total_loss", flaky)
    with pytest.raises(TrainingDiverged, match="step 1"):
        train(smoke_config(), scenes, tmp_path)
    assert load_checkpoint(tmp_path / "last_good.dqnt").step == 1


def test_checkpoint_forward_is_bit_identical(tmp_path, scenes):
    result = train(smoke_config(), scenes, tmp_path)
    model, cfg = model_from_checkpoint(load_checkpoint(result.checkpoint))
    images = np.stack([s.image for s in scenes])
    assert cfg == smoke_config()
    assert np.array_equal(model.predict(images), result.model.predict(images))


# -- evaluation ----------------------------------------------------------------------------
@pytest.fixture(scope="module")
def trained(tmp_path_factory, scenes):
    root = tmp_path_factory.mktemp("run")
    result = train(smoke_config(), scenes, root / "run")
    data = save_dataset(gen_synthetic(smoke_config().synth(100), 3), root / "held_out")
    return result.checkpoint, data, root


def test_eval_is_repeatable_and_matches_csv(trained):
    ckpt, data, root = trained
    first = evaluate(ckpt, data, root / "r1.json")
    second = evaluate(ckpt, data, root / "r2.json")
    assert first.summary() == second.summary()
    assert (root / "r1.csv").read_text() == (root / "r2.csv").read_text()
    with open(root / "r1.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    for key in ("s_measure", "e_measure", "weighted_f", "mae"):
        assert abs(np.mean([float(r[key]) for r in rows]) - getattr(first, key)) < 1e-12
    assert json.loads((root / "r1.json").read_text())["count"] == 3
    assert len(list((root / "r1_predictions").glob("*.png"))) == 3


def test_eval_empty_directory(trained, tmp_path):
    ckpt, _, _ = trained
    with pytest.raises(FileNotFoundError):
        evaluate(ckpt, tmp_path, tmp_path / "r.json")


def test_eval_refuses_mismatched_config(trained):
    ckpt, data, root = trained
    with pytest.raises(ConfigMismatch, match="lr"):
        evaluate(ckpt, data, root / "r3.json", expect=smoke_config(lr=0.5))
    evaluate(ckpt, data, root / "r4.json", expect=smoke_config())


# -- ablation ------------------------------------------------------------------------------
def window_base() -> TrainConfig:
    cfg = build(parse_text("image_size = 64\npatch_size = 4\nembed_dim = 8\ndepth = 1\nheads = 2\n"
                           "cnn_widths = 4 4 6 8 8\ndecoder_width = 4\nweight_kernel = 5\n"
                           "max_steps = 1\nbatch_size = 2\nn_train = 2"))
    return cfg


def test_window_sweep_score_ratio(tmp_path):
    base = window_base()
    rows = ablate("window_size", ["1", "2", "4", "full", "3"], base, n_held_out=2, out=tmp_path)
    assert [r.value for r in rows] == ["1", "2", "4", "full"]  # 3 does not divide the 16x16 grid
    counts = [r.score_elements for r in rows]
    assert [c * 256 // counts[-1] for c in counts] == [1, 4, 16, 256]
    assert [c // counts[0] for c in counts] == [1, 4, 16, 256]
    sizes = [r.score_bytes for r in rows]
    assert sizes == sorted(sizes) and len(set(sizes)) == 4
    assert len({r.batches for r in rows}) == 1  # common random numbers
    table = json.loads((tmp_path / "ablation_window_size.json").read_text())
    assert [t["value"] for t in table] == ["1", "2", "4", "full"]
    assert (tmp_path / "ablation_window_size.csv").exists()


def test_single_value_sweep():
    rows = ablate("fusion_mode", ["add"], window_base(), n_held_out=2)
    assert len(rows) == 1 and rows[0].score_elements == 0


def test_variant_validation():
    base = window_base()
    with pytest.raises(ConfigError):
        variant(base, "fusion_mode", "gate")
    with pytest.raises(ConfigError):
        variant(base, "stage_mask", "none")
    assert variant(base, "stage_mask", "5").model.stages == (5,)
    with pytest.raises(ConfigError):
        ablate("depth", ["1"], base)


# -- command line --------------------------------------------------------------------------
def test_cli_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "smoke.cfg"
    cfg.write_text(
        "image_size = 32\npatch_size = 8\nembed_dim = 8\ndepth = 1\nheads = 2\ncnn_widths = 4 4 6 8 8\n"
        "window = 2\ndecoder_width = 4\nweight_kernel = 5\nmax_steps = 2\nbatch_size = 2\nn_train = 2\n"
    )
    assert cli.main(["gen-data", "--n", "2", "--size", "32", "--seed", "9", "--out", str(tmp_path / "d")]) == 0
    assert cli.main(["train", "--config", str(cfg), "--data", str(tmp_path / "d"), "--out", str(tmp_path / "run")]) == 0
    ckpt = str(tmp_path / "run" / "checkpoint.dqnt")
    assert cli.main(["eval", "--checkpoint", ckpt, "--data", str(tmp_path / "d"), "--report", str(tmp_path / "rep")]) == 0
    assert json.loads((tmp_path / "rep.json").read_text())["count"] == 2
    assert cli.main(["train", "--config", str(cfg), "--data", "synthetic", "--out", str(tmp_path / "r2"), "--seed", "4"]) == 0
    assert cli.main(["gradcheck", "--module", "objectives"]) == 0
    assert "gradient checks passed" in capsys.readouterr().out


def test_cli_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("max_steps = 2\nlearning_rate = 1\n")
    assert cli.main(["train", "--config", str(bad), "--data", "synthetic", "--out", str(tmp_path)]) == 2
    assert "unknown key" in capsys.readouterr().err
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.dqnt"), "--data", ".", "--report", "r"]) == 2
    assert cli.main(["gradcheck", "--module", "nope"]) == 2


def test_poly_lr_halfway():
    assert poly_lr(250, 500, 0.001, 0.9) == pytest.approx(0.001 * 0.5**0.9, rel=1e-15)


def test_zero_lr_training_keeps_initial_weights():
    cfg = replace(window_base(), lr=0.0, max_steps=4)
    result = train(cfg, gen_synthetic(cfg.synth(), cfg.n_train))
    fresh = DQNet(cfg.model, seed=cfg.seed)
    for (name, p), (_, q) in zip(result.model.named_parameters(), fresh.named_parameters()):
        assert np.array_equal(p.data, q.data), name


def test_window_sweep_on_8x8_grid():
    base = window_base()
    base = replace(base, model=replace(base.model, vit=replace(base.model.vit, patch_size=8)))  # 8x8 grid
    rows = ablate("window_size", ["1", "2", "4", "full"], base, n_held_out=1)
    counts = [r.score_elements for r in rows]
    assert [c // counts[0] for c in counts] == [1, 4, 16, 64]


def test_fusion_sweep_covers_every_mode():
    rows = ablate("fusion_mode", list(FUSION_MODES), window_base(), n_held_out=1)
    assert [r.value for r in rows] == list(FUSION_MODES)
    assert len({r.batches for r in rows}) == 1


def test_single_value_sweep_equals_plain_training():
    base = window_base()
    data = gen_synthetic(base.synth(), base.n_train)
    held = gen_synthetic(base.synth(HELD_OUT_OFFSET), 2)
    row = ablate("fusion_mode", ["rbq"], base, data, held)[0]
    report = evaluate_samples(train(base, data).model, held)
    assert (row.s_measure, row.e_measure, row.weighted_f, row.mae) == (
        report.s_measure, report.e_measure, report.weighted_f, report.mae)
