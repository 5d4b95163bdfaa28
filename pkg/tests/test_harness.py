import json
import math

import numpy as np
import pytest
import torch

from vlscc import metrics, ratequant
from vlscc.channel import sidelink_bpp
from vlscc.harness import checkpoint as ckpt
from vlscc.harness.cli import main as cli_main
from vlscc.harness.config import OUTPUT_ROOT_ENV, RunConfig, load_config, save_config
from vlscc.harness.metrics_log import COLUMNS, MetricsLog, read_rows
from vlscc.harness.runner import (
    TrainingDiverged,
    _Trainer,
    evaluate,
    export_rate_maps,
    fixed_length_baseline,
    select_gamma,
    sweep,
    train,
)
from vlscc.sidelink import sidelink_encode

VEC_CODEC = dict(dim=12, n_symbols=16, levels=8, hidden=16, sce_layers=2, scd_layers=2, ran_layers=2)
VEC_DATA = {"dim": 12, "components": [{"weight": 0.5, "intrinsic_dim": 2}, {"weight": 0.5, "intrinsic_dim": 8}]}
IMG_CODEC = dict(n_symbols=6, levels=8, feat_channels=4, ran_channels=4)
IMG_DATA = {"source": "procedural", "template": "half", "size": 32}


@pytest.fixture(autouse=True)
def _output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "runs"))


def vec_cfg(**kw):
    base = dict(task="vector", run_id="vec", codec=VEC_CODEC, data=VEC_DATA, lr=1e-3, batch_size=8,
                epochs=2, steps_per_epoch=3, val_samples=16, eval_samples=10, gamma=0.05,
                eval_snr_db=[0.0, 10.0], eval_seeds=[0, 1])
    base.update(kw)
    return RunConfig(**base)


def img_cfg(**kw):
    base = dict(task="image", run_id="img", codec=IMG_CODEC, data=IMG_DATA, lr=1e-3, batch_size=2,
                epochs=1, steps_per_epoch=2, val_samples=2, eval_samples=3, gamma=1e-4,
                perceptual={"channels": [4, 4]})
    base.update(kw)
    return RunConfig(**base)


# -- config ----------------------------------------------------------------


@pytest.mark.parametrize("bad", [
    dict(task="audio"), dict(run_id=""), dict(run_id="../x"), dict(lr=0), dict(epochs=-1),
    dict(eval_snr_db=[]), dict(eval_seeds=[]), dict(budget=0), dict(gamma=-1),
    dict(codec={**VEC_CODEC, "levels": 1}), dict(data={**VEC_DATA, "dim": 11}),
    dict(batch_size=0), dict(train_snr_db=float("nan")),
])
def test_config_rejects_invalid(bad):
    with pytest.raises(ValueError):
        vec_cfg(**bad)


def test_image_config_validation():
    with pytest.raises(ValueError):
        img_cfg(data={"source": "procedural", "size": 40})
    with pytest.raises(ValueError):
        img_cfg(data={"source": "folder"})
    with pytest.raises(ValueError):
        img_cfg(data={"source": "camera"})


def test_config_file_roundtrip_and_overrides(tmp_path):
    cfg = vec_cfg()
    save_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.json") == cfg
    over = load_config(tmp_path / "c.yaml", ["gamma=0.2", "codec.n_symbols=8", "eval_seeds=[3]"])
    assert over.gamma == 0.2 and over.codec["n_symbols"] == 8 and over.eval_seeds == [3]
    with pytest.raises(ValueError):
        load_config(tmp_path / "c.yaml", ["nonsense"])
    with pytest.raises(ValueError):
        RunConfig.from_dict({"task": "vector", "bogus": 1})


def test_output_root_env(tmp_path):
    assert vec_cfg().output_dir() == tmp_path / "runs" / "vec"


# -- metrics log -----------------------------------------------------------


def test_metrics_log(tmp_path):
    path = tmp_path / "m.csv"
    log = MetricsLog(path)
    MetricsLog(path)  # reopening does not duplicate the header
    log.append({"run_id": "a", "phase": "eval", "seed": 1, "distortion": 0.5})
    log.append({"run_id": "b", "phase": "val", "epoch": 2})
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(COLUMNS) and len(lines) == 3
    rows = read_rows(path)
    assert rows[0]["distortion"] == 0.5 and rows[0]["seed"] == 1 and rows[0]["schema"] == 1
    assert math.isnan(rows[1]["distortion"])
    with pytest.raises(KeyError):
        log.append({"unknown": 1})
    path.write_text("a,b\n")
    with pytest.raises(ValueError):
        MetricsLog(path)


# -- checkpoints -----------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    cfg = vec_cfg()
    model = ckpt.build_codec("codec1d", cfg.codec_config().to_dict())
    ckpt.save_checkpoint(tmp_path / "m.pt", model, run_config=cfg.to_dict(), step=5, epoch=1)
    blob = ckpt.load_checkpoint(tmp_path / "m.pt")
    assert blob["step"] == 5 and blob["kind"] == "codec1d"
    for p, q in zip(model.parameters(), blob["model"].parameters()):
        assert torch.equal(p, q)
    assert RunConfig.from_dict(blob["run_config"]) == cfg


def test_checkpoint_rejects_foreign_files(tmp_path):
    torch.save({"format": "other"}, tmp_path / "x.pt")
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_checkpoint(tmp_path / "x.pt")
    model = ckpt.build_codec("codec2d", IMG_CODEC)
    ckpt.save_checkpoint(tmp_path / "y.pt", model)
    blob = torch.load(tmp_path / "y.pt", weights_only=True)
    blob["version"] = 99
    torch.save(blob, tmp_path / "y.pt")
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_checkpoint(tmp_path / "y.pt")
    with pytest.raises(ckpt.CheckpointError):
        ckpt.build_codec("codec3d", {})


# -- training --------------------------------------------------------------


def test_epochs_zero_writes_init_checkpoint_and_header_only_log():
    cfg = vec_cfg(epochs=0)
    res = train(cfg)
    assert res.log_path.read_text().strip() == ",".join(COLUMNS)
    blob = ckpt.load_checkpoint(res.last)
    fresh = ckpt.build_codec("codec1d", cfg.codec_config().to_dict())
    for p, q in zip(fresh.parameters(), blob["model"].parameters()):
        assert torch.equal(p, q)
    assert res.best.exists()


def test_training_is_deterministic_and_logs_validation():
    a = train(vec_cfg(run_id="a"))
    b = train(vec_cfg(run_id="b"))
    ra, rb = read_rows(a.log_path), read_rows(b.log_path)
    assert len(ra) == 2 and [r["epoch"] for r in ra] == [1, 2]
    for x, y in zip(ra, rb):
        x.pop("run_id"), y.pop("run_id")
        assert x == y


def test_resume_matches_uninterrupted_run():
    full = vec_cfg(run_id="full", epochs=2, lam=0.1)
    train(full)
    part = vec_cfg(run_id="part", epochs=1, lam=0.1)
    res = train(part)
    resumed = train(vec_cfg(run_id="part", epochs=2, lam=0.1), resume=res.last)
    full_rows = read_rows(full.output_dir() / "metrics.csv")
    part_rows = read_rows(resumed.log_path)
    assert [r["loss"] for r in part_rows] == [r["loss"] for r in full_rows]
    # the next training step after resuming gives the same loss
    t_full, t_res = _Trainer(full), _Trainer(full)
    t_full.restore(torch.load(full.output_dir() / "last.pt", weights_only=True))
    t_res.restore(torch.load(resumed.last, weights_only=True))
    assert t_full.step(6) == t_res.step(6)


def test_divergence_is_reported():
    cfg = vec_cfg(epochs=1)
    trainer = _Trainer(cfg)
    with torch.no_grad():
        trainer.model.scd[0].weight.fill_(float("nan"))
    with pytest.raises(TrainingDiverged, match="non-finite loss at step 0"):
        trainer.step(0)


def test_random_rate_warmup_uses_random_levels():
    trainer = _Trainer(vec_cfg(random_rate_steps=2))
    x = torch.zeros(8, 12)
    q0 = trainer.random_quant(x, 0)
    assert q0.shape == (8,) and q0.max() < 8
    assert torch.equal(q0, trainer.random_quant(x, 0))
    assert trainer.random_quant(x, 2) is None
    every = _Trainer(vec_cfg(random_rate_steps=2, random_rate_every=3))
    assert [every.random_quant(x, s) is not None for s in range(2, 8)] == [False, True, False, False, True, False]
    assert trainer.gamma_at(0) == 0.05
    assert _Trainer(vec_cfg(gamma_warmup_steps=3)).gamma_at(2) == 0.0


# -- evaluation ------------------------------------------------------------


def _check_accounting(rows, model, cfg):
    """Exact accounting invariants for one evaluation."""
    from vlscc.harness.runner import _Data, _derive, _EVAL
    ccfg = model.cfg
    for row in rows:
        x, _ = _Data(cfg).batch(row["n_samples"], _derive(row["seed"], _EVAL))
        frames = model.encode(x)
        q = [f.quant for f in frames]
        kept = np.mean([np.sum(ratequant.mask_popcount(v, ccfg.n_symbols, ccfg.levels)) for v in q])
        assert row["mean_kept_symbols"] == kept
        bits = np.mean([sidelink_encode(v, ccfg.levels).total_bits for v in q])
        assert row["sidelink_bits"] == bits
        if cfg.task == "image":
            h = w = cfg.image_size
            assert row["spp"] == metrics.spp(kept, h, w)
            assert row["sidelink_fixed_bpp"] == sidelink_bpp(h, w, ccfg.levels)
            assert row["sidelink_bpp"] == bits / (h * w)


def test_evaluate_row_accounting():
    cfg = vec_cfg(eval_snr_db=[-5.0, 0.0, 5.0, 10.0], eval_seeds=[0, 1])
    res = train(cfg)
    rows = evaluate(res.last)
    assert len(rows) == 8
    assert {(r["snr_db"], r["seed"]) for r in rows} == {(s, k) for s in (-5.0, 0.0, 5.0, 10.0) for k in (0, 1)}
    assert rows == evaluate(res.last)
    _check_accounting(rows, ckpt.load_checkpoint(res.last)["model"], cfg)


def test_evaluate_image_accounting():
    cfg = img_cfg(lam=0.5)
    res = train(cfg)
    rows = evaluate(res.last, snr_list=[0.0, 20.0], seeds=[2])
    assert len(rows) == 2
    assert all(np.isfinite(r["psnr"]) and r["lpips"] >= 0 for r in rows)
    _check_accounting(rows, ckpt.load_checkpoint(res.last)["model"], cfg)


def test_evaluate_task_mismatch():
    res = train(vec_cfg(epochs=0))
    with pytest.raises(ValueError):
        evaluate(res.last, img_cfg())


# -- sweeps, budgets, baselines ----------------------------------------------


def test_sweep_three_gammas():
    cfg = vec_cfg(run_id="sw", epochs=1, eval_seeds=[0], eval_snr_db=[10.0])
    rows = sweep(cfg, "gamma", [0.0, 0.1, 0.2])
    assert len(rows) == 3 and [r["gamma"] for r in rows] == [0.0, 0.1, 0.2]
    for g in ("0", "0.1", "0.2"):
        assert (cfg.output_dir() / f"gamma-{g}" / "last.pt").exists()
    assert len(read_rows(cfg.output_dir() / "sweep.csv")) == 3
    with pytest.raises(ValueError):
        sweep(cfg, "gamma", [])
    with pytest.raises(ValueError):
        sweep(cfg, "lr", [1.0])


def test_select_gamma_rule():
    rows = [{"gamma": 0.01, "mean_kept_symbols": 2300.0}, {"gamma": 0.05, "mean_kept_symbols": 1800.0},
            {"gamma": 0.1, "mean_kept_symbols": 1200.0}]
    assert select_gamma(2000, rows) == 0.05
    assert select_gamma(1500, rows) == 0.1
    with pytest.raises(ValueError):
        select_gamma(1000, rows)
    # seeds are averaged per gamma
    rows2 = [{"gamma": 0.1, "mean_kept_symbols": 1900.0}, {"gamma": 0.1, "mean_kept_symbols": 2200.0}]
    with pytest.raises(ValueError):
        select_gamma(2000, rows2)


def test_fixed_length_baseline():
    cfg = vec_cfg(epochs=1)
    res, rows = fixed_length_baseline(cfg, 8)
    model = ckpt.load_checkpoint(res.last)["model"]
    assert model.ran is None and model.cfg.fixed_symbols == 8
    assert all(r["mask_density"] == 0.5 and r["mean_kept_symbols"] == 8 for r in rows)
    assert all(r["sidelink_bits"] == 0 for r in rows)
    _, full = fixed_length_baseline(cfg, 16)
    assert full[0]["mask_density"] == 1.0
    with pytest.raises(ValueError):
        fixed_length_baseline(cfg, 17)


def test_export(tmp_path):
    res = train(img_cfg(epochs=0))
    out = export_rate_maps(res.last, tmp_path / "maps.png", n=5)
    from PIL import Image
    with Image.open(out) as im:
        assert im.mode == "L"
    res = train(vec_cfg(epochs=0))
    out = export_rate_maps(res.last, tmp_path / "rates.csv", n=4)
    assert len(out.read_text().splitlines()) == 5


# -- CLI -------------------------------------------------------------------


def test_cli_end_to_end(tmp_path, capsys):
    cfg = vec_cfg(run_id="cli", epochs=1)
    save_config(cfg, tmp_path / "c.yaml")
    assert cli_main(["train", "--config", str(tmp_path / "c.yaml"), "--gamma", "0.1"]) == 0
    last = cfg.output_dir() / "last.pt"
    assert last.exists()
    capsys.readouterr()
    assert cli_main(["eval", str(last), "--snr", "0,5", "--seeds", "0", "--out", str(tmp_path / "e.csv")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and json.loads(lines[0])["gamma"] == 0.1
    assert len(read_rows(tmp_path / "e.csv")) == 2
    assert cli_main(["select-gamma", str(tmp_path / "e.csv"), "--budget", "100"]) == 0
    assert capsys.readouterr().out.strip() == "0.1"
    assert cli_main(["select-gamma", str(tmp_path / "e.csv"), "--budget", "0.001"]) == 2
    assert cli_main(["export", str(last), "--out", str(tmp_path / "r.csv")]) == 0
    assert cli_main(["baseline", "--config", str(tmp_path / "c.yaml"), "--n-symbols", "4",
                     "--set", "run_id=cli-base"]) == 0
    assert cli_main(["sweep", "--config", str(tmp_path / "c.yaml"), "--axis", "snr", "--values", "0,10",
                     "--epochs", "0"]) == 0


def test_golden_checkpoint_loads(tmp_path):
    from pathlib import Path
    data = Path(__file__).parent / "data"
    blob = ckpt.load_checkpoint(data / "golden_codec1d_v1.pt")
    assert blob["version"] == 1 and blob["kind"] == "codec1d" and blob["step"] == 7
    expected = json.loads((data / "golden_codec1d_v1.json").read_text())
    x = torch.linspace(-1, 1, 12, dtype=torch.float64).reshape(2, 6)
    with torch.no_grad():
        out = blob["model"](x)
    assert out.quant.tolist() == expected["quant"]
    assert np.allclose(out.rate.numpy(), expected["rate"], rtol=0, atol=1e-12)
    assert np.allclose(out.x_hat.numpy(), expected["x_hat"], rtol=0, atol=1e-12)
