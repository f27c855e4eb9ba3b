import csv
import json
import shutil
from pathlib import Path

import pytest

from gsfm.cli import main
from gsfm.config import RunConfig, apply_overrides

TINY = ["model.input_size=[32,32]", "model.base_channels=4", "model.key_channels=4", "model.value_channels=8",
        "model.lfm_sigma=3", "model.hfm_sigma=3", "synth.size=32", "synth.length=4", "synth.min_extent=6",
        "synth.max_extent=10", "data.num_train=3", "data.num_eval=2", "train.pretrain_steps=2",
        "train.main_steps=4", "train.batch_size=2", "train.checkpoint_every=3"]


@pytest.fixture
def tiny_config(tmp_path):
    cfg = apply_overrides(RunConfig(), TINY + [f"data.root={tmp_path / 'data'}"])
    path = tmp_path / "tiny.json"
    cfg.save(path)
    return path


@pytest.fixture
def dataset(tiny_config, tmp_path):
    assert main(["gen-data", "--config", str(tiny_config)]) == 0
    return tmp_path / "data"


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def read_losses(path):
    return [float(r["loss"]) for r in csv.DictReader(open(path))]


def test_gen_data_deterministic_and_counted(dataset, tiny_config, tmp_path):
    man = json.loads((dataset / "manifest.json").read_text())
    assert len(man["train"]) == 3 and len(man["eval"]) == 2
    assert len(list((dataset / "JPEGImages").iterdir())) == len(man["train"]) + len(man["eval"])
    assert len(list((dataset / "Annotations").iterdir())) == 5
    first = tree_bytes(dataset)
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(tmp_path / "again")]) == 0
    assert tree_bytes(tmp_path / "again") == first


def test_gen_data_refuses_existing(dataset, tiny_config):
    assert main(["gen-data", "--config", str(tiny_config)]) == 2
    assert main(["gen-data", "--config", str(tiny_config), "--force"]) == 0


def test_default_dataset_size():
    cfg = RunConfig()
    assert cfg.data.num_train + cfg.data.num_eval == 250


def test_train_snapshot_and_resume(dataset, tiny_config, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--config", str(tiny_config), "--out", str(run), "--quiet"]) == 0
    for name in ("config.json", "seed.txt", "git_describe.txt", "train_log.csv", "metrics.json", "metrics.csv"):
        assert (run / name).exists(), name
    snap = json.loads((run / "config.json").read_text())
    assert snap["model"]["boundary_loss_weight"] == 0.05
    full = read_losses(run / "train_log.csv")
    assert len(full) == 6

    resumed = tmp_path / "resumed"
    ckpt = run / "checkpoints" / "step_000003"
    assert main(["train", "--config", str(tiny_config), "--out", str(resumed), "--resume", str(ckpt),
                 "--quiet", "--no-eval"]) == 0
    assert read_losses(resumed / "train_log.csv") == full[3:]


def test_eval_ground_truth_as_predictions(dataset, tiny_config, tmp_path):
    args = ["eval", "--config", str(tiny_config), "--pred-dir", str(dataset / "Annotations")]
    assert main(args + ["--out", str(tmp_path / "e1")]) == 0
    rep = json.loads((tmp_path / "e1" / "metrics.json").read_text())
    assert rep["global"] == {"J": 1.0, "F": 1.0, "JF": 1.0}
    assert set(rep["per_sequence"]) == set(json.loads((dataset / "manifest.json").read_text())["eval"])
    assert main(args + ["--out", str(tmp_path / "e2")]) == 0
    assert (tmp_path / "e1" / "metrics.json").read_bytes() == (tmp_path / "e2" / "metrics.json").read_bytes()


def test_eval_checkpoint_deterministic(dataset, tiny_config, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--config", str(tiny_config), "--out", str(run), "--quiet", "--no-eval"]) == 0
    ck = str(run / "checkpoint")
    assert main(["eval", "--checkpoint", ck, "--data", str(dataset), "--out", str(tmp_path / "a"),
                 "--save-masks"]) == 0
    assert main(["eval", "--checkpoint", ck, "--data", str(dataset), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    # saved masks score identically when fed back in
    assert main(["eval", "--pred-dir", str(tmp_path / "a" / "masks"), "--data", str(dataset),
                 "--config", str(tiny_config), "--out", str(tmp_path / "c")]) == 0
    a = json.loads((tmp_path / "a" / "metrics.json").read_text())
    c = json.loads((tmp_path / "c" / "metrics.json").read_text())
    assert a["global"] == c["global"]

    seq = json.loads((dataset / "manifest.json").read_text())["eval"][0]
    out = tmp_path / "inferred"
    assert main(["infer", "--checkpoint", ck, "--frames", str(dataset / "JPEGImages" / seq),
                 "--first-mask", str(dataset / "Annotations" / seq / "00000.png"), "--out", str(out)]) == 0
    assert len(list(out.glob("*.png"))) == 4


def test_eval_config_mismatch(dataset, tiny_config, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--config", str(tiny_config), "--out", str(run), "--quiet", "--no-eval"]) == 0
    ck = run / "checkpoint"
    cfg = json.loads((ck / "config.json").read_text())
    cfg["model"]["key_channels"] = 6
    (ck / "config.json").write_text(json.dumps(cfg))
    assert main(["eval", "--checkpoint", str(ck), "--data", str(dataset), "--out", str(tmp_path / "e")]) == 1


def test_eval_missing_predictions(dataset, tiny_config, tmp_path):
    preds = tmp_path / "preds"
    shutil.copytree(dataset / "Annotations", preds)
    seq = next(preds.iterdir())
    next(seq.glob("*.png")).unlink()
    assert main(["eval", "--config", str(tiny_config), "--pred-dir", str(preds), "--split", "all",
                 "--out", str(tmp_path / "o")]) == 1


def test_ablate_rows(dataset, tiny_config, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(tiny_config), "--set", "train.main_steps=2",
                 "--variants", "baseline", "full", "--seeds", "0", "1", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert len(rows) == 4
    full = [r for r in rows if r["variant"] == "full"]
    assert full and all(r[k] != "" for r in full for k in ("J", "F", "JF"))
    assert (out / "ablation.svg").read_text().lstrip().startswith("<?xml")
    assert set(json.loads((out / "summary.json").read_text())) == {"baseline", "full"}


def test_usage_errors(tmp_path, capsys):
    assert main(["ablate", "--variants", "nope", "--out", str(tmp_path / "x")]) == 2
    assert main(["train", "--set", "model.no_such_field=1", "--out", str(tmp_path / "y")]) == 2
    assert main(["eval", "--data", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code == 2


def test_eval_empty_data_fails(tmp_path, tiny_config):
    assert main(["eval", "--config", str(tiny_config), "--pred-dir", str(tmp_path), "--data", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o")]) == 1


def test_verify_quick(capsys):
    assert main(["verify", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "fft" in out.lower()
