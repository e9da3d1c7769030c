"""CLI surface: flags, exit codes, artifacts, determinism."""

import csv
import hashlib
import json
import re

import numpy as np
import pytest

from histlift import data as hd
from histlift.cli import main
from histlift.model import ModelConfig, PoseLifter, count_macs, count_params, save_checkpoint

TOY_MODEL = {"layers": 2, "channels": 8, "frames": 6, "joints": 17, "heads": 4,
             "e_temporal": 2, "e_spatial": 4}


def write_config(path, epochs=2, **model_overrides):
    cfg = {"model": {**TOY_MODEL, **model_overrides},
           "train": {"epochs": epochs, "batch_size": 4, "eval_fraction": 0.25,
                     "checkpoint_every": epochs or 1}}
    path.write_text(json.dumps(cfg))
    return path


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "toy.hpd1"
    assert main(["gen-data", "--clips", "12", "--frames", "6",
                 "--seed", "3", "--out", str(path)]) == 0
    return path


# -- gen-data -------------------------------------------------------------------


def test_gen_data_produces_requested_clips(tmp_path):
    out = tmp_path / "ten.hpd1"
    assert main(["gen-data", "--clips", "10", "--frames", "4",
                 "--seed", "1", "--out", str(out)]) == 0
    assert len(hd.read_dataset(out)) == 10


def test_gen_data_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--clips", "2"])
    assert exc.value.code == 2


def test_gen_data_deterministic_hash(tmp_path):
    a, b = tmp_path / "a.hpd1", tmp_path / "b.hpd1"
    main(["gen-data", "--clips", "5", "--frames", "4", "--seed", "9", "--out", str(a)])
    main(["gen-data", "--clips", "5", "--frames", "4", "--seed", "9", "--out", str(b)])
    assert sha(a) == sha(b)
    c = tmp_path / "c.hpd1"
    main(["gen-data", "--clips", "5", "--frames", "4", "--seed", "10", "--out", str(c)])
    assert sha(a) != sha(c)


# -- train ----------------------------------------------------------------------


def test_train_unknown_config_key_exits_2(tmp_path, dataset, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"model": {"layrs": 2}, "train": {}}))
    code = main(["train", "--config", str(cfg), "--data", str(dataset),
                 "--out-dir", str(tmp_path / "run")])
    assert code == 2
    assert "layrs" in capsys.readouterr().err


def test_train_writes_metrics_and_manifest(tmp_path, dataset):
    cfg = write_config(tmp_path / "cfg.json", epochs=2)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(dataset),
                 "--seed", "0", "--out-dir", str(out)]) == 0
    rows = (out / "metrics.csv").read_text().splitlines()
    assert len(rows) == 2 + 2  # header + epoch0 + 2 epochs... epochs+1 data rows
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["finished_at"] is not None
    assert manifest["seed"] == 0
    assert len(list(out.glob("checkpoint_*.hpkc"))) >= 1


def test_train_metrics_deterministic(tmp_path, dataset):
    cfg = write_config(tmp_path / "cfg.json", epochs=1)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    main(["train", "--config", str(cfg), "--data", str(dataset), "--seed", "5",
          "--out-dir", str(out_a)])
    main(["train", "--config", str(cfg), "--data", str(dataset), "--seed", "5",
          "--out-dir", str(out_b)])
    assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()


def test_train_frames_mismatch_exits_2(tmp_path, dataset):
    cfg = write_config(tmp_path / "cfg.json", frames=9)
    assert main(["train", "--config", str(cfg), "--data", str(dataset),
                 "--out-dir", str(tmp_path / "run")]) == 2


# -- eval ------------------------------------------------------------------------


def test_eval_inject_gt_gives_zero_errors(tmp_path, dataset):
    model = PoseLifter(ModelConfig(**TOY_MODEL), seed=0)
    ckpt = tmp_path / "m.hpkc"
    save_checkpoint(ckpt, model)
    report_path = tmp_path / "report.json"
    action_csv = tmp_path / "actions.csv"
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(dataset),
                 "--out", str(report_path), "--per-action-csv", str(action_csv),
                 "--inject-gt"]) == 0
    report = json.loads(report_path.read_text())
    assert report["mpjpe_mm"] == 0.0
    assert abs(report["p_mpjpe_mm"]) < 1e-9  # SVD alignment noise only
    assert report["pck_percent"] == 100.0 and report["auc_percent"] == 100.0
    table = action_csv.read_text().splitlines()
    assert table[0].startswith("metric,")
    assert table[0].endswith(",Avg")


def test_eval_missing_file_exits_1(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "nope.hpkc"),
                 "--data", str(tmp_path / "nope.hpd1")]) == 1


def test_eval_matches_direct_metrics(tmp_path, dataset):
    from histlift import train as htr
    model = PoseLifter(ModelConfig(**TOY_MODEL), seed=1)
    ckpt = tmp_path / "m.hpkc"
    save_checkpoint(ckpt, model)
    report_path = tmp_path / "report.json"
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(dataset),
                 "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())

    clips = hd.read_dataset(dataset)
    skeleton = hd.Skeleton.default_human()
    inputs, targets, actions = htr.prepare_clips(clips, skeleton)
    loaded, _, _ = __import__("histlift.model", fromlist=["load_checkpoint"]).load_checkpoint(ckpt)
    direct = htr.evaluate_model(loaded, inputs, targets, skeleton.flip_pairs,
                                actions=actions, flip_average=True)
    assert abs(report["mpjpe_mm"] - direct.mpjpe_mm) < 1e-9
    assert abs(report["p_mpjpe_mm"] - direct.p_mpjpe_mm) < 1e-9


# -- ablate -------------------------------------------------------------------------


def test_ablate_component_grid(tmp_path, dataset):
    cfg = write_config(tmp_path / "cfg.json", epochs=1)
    out = tmp_path / "sweep"
    assert main(["ablate", "--config", str(cfg), "--data", str(dataset),
                 "--out-dir", str(out), "--seeds", "0", "--grid", "component"]) == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["cell"] for r in rows] == ["backbone", "hpa", "lpa", "full"]
    for row in rows:
        cfg_d = dict(TOY_MODEL)
        cfg_d.update(hpa_enabled=row["hpa"] == "1", lpa_enabled=row["lpa"] == "1")
        mc = ModelConfig(**cfg_d)
        assert int(row["params"]) == count_params(mc)
        assert int(row["macs"]) == count_macs(mc)
    # +LPA alone never feeds the pool back, so it scores identically to the backbone
    by_cell = {r["cell"]: r for r in rows}
    assert by_cell["lpa"]["eval_mpjpe"] == by_cell["backbone"]["eval_mpjpe"]
    assert (out / "cells" / "backbone_s0" / "metrics.csv").exists()


def test_ablate_cell_equals_direct_train(tmp_path, dataset):
    from histlift import train as htr
    from histlift.train import RunConfig

    cfg_path = write_config(tmp_path / "cfg.json", epochs=1)
    out = tmp_path / "sweep"
    main(["ablate", "--config", str(cfg_path), "--data", str(dataset),
          "--out-dir", str(out), "--seeds", "0", "--grid", "component"])
    stored = json.loads((out / "cells" / "backbone_s0" / "result.json").read_text())

    run = RunConfig.from_dict(json.loads(cfg_path.read_text()))
    run.model.hpa_enabled = run.model.lpa_enabled = False
    direct = htr.train(run, hd.read_dataset(dataset), seed=0)
    assert stored["eval_mpjpe"] == direct.history[-1]["eval_mpjpe"]
    assert stored["eval_pmpjpe"] == direct.history[-1]["eval_pmpjpe"]


def test_eval_reports_flip_gain_soft_metric(tmp_path, dataset):
    model = PoseLifter(ModelConfig(**TOY_MODEL), seed=6)
    ckpt = tmp_path / "m.hpkc"
    save_checkpoint(ckpt, model)
    out = tmp_path / "report.json"
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(dataset),
                 "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert isinstance(report["flip_averaging_gain_mm"], float)


def test_ablate_resume_skips_trained_cells(tmp_path, dataset):
    cfg = write_config(tmp_path / "cfg.json", epochs=1)
    out = tmp_path / "sweep"
    main(["ablate", "--config", str(cfg), "--data", str(dataset),
          "--out-dir", str(out), "--seeds", "0", "--grid", "extent"])
    first = (out / "sweep.csv").read_bytes()
    marker = out / "cells" / "extent_all_s0" / "result.json"
    stamp = marker.stat().st_mtime_ns
    main(["ablate", "--config", str(cfg), "--data", str(dataset),
          "--out-dir", str(out), "--seeds", "0", "--grid", "extent"])
    assert (out / "sweep.csv").read_bytes() == first
    assert marker.stat().st_mtime_ns == stamp  # cell result reused, not retrained


# -- analyze ----------------------------------------------------------------------------


def svg_values(svg_text):
    return [float(v) for v in re.findall(r'data-value="([^"]+)"', svg_text)]


def test_analyze_attn_uniform_at_init(tmp_path, dataset):
    model = PoseLifter(ModelConfig(**TOY_MODEL), seed=2)
    ckpt = tmp_path / "m.hpkc"
    save_checkpoint(ckpt, model)
    out = tmp_path / "attn"
    assert main(["analyze", "--ckpt", str(ckpt), "--data", str(dataset),
                 "--what", "attn", "--out-dir", str(out), "--clips", "4"]) == 0
    with open(out / "history_attention.csv") as fh:
        rows = list(csv.reader(fh))
    # consuming layer i sees i+1 pool entries -> uniform 1/(i+1) at zero init
    for i, row in enumerate(rows[1:], start=1):
        values = [float(v) for v in row[1:] if v != ""]
        assert len(values) == i + 1
        assert np.allclose(values, 1.0 / (i + 1), atol=1e-7)


def test_analyze_cka_outputs_and_svg_roundtrip(tmp_path, dataset):
    model = PoseLifter(ModelConfig(**TOY_MODEL), seed=3)
    ckpt = tmp_path / "m.hpkc"
    save_checkpoint(ckpt, model)
    out = tmp_path / "cka"
    assert main(["analyze", "--ckpt", str(ckpt), "--data", str(dataset),
                 "--what", "cka", "--out-dir", str(out), "--clips", "4"]) == 0
    with open(out / "cka.csv") as fh:
        rows = list(csv.reader(fh))
    matrix = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    assert matrix.shape == (3, 3)
    assert np.allclose(np.diag(matrix), 1.0, atol=1e-6)
    assert np.allclose(matrix, matrix.T, atol=1e-9)

    svg = (out / "cka.svg").read_text()
    from_svg = svg_values(svg)
    flat = [float(v) for row in rows[1:] for v in row[1:]]
    assert len(from_svg) == len(flat)
    for a, b in zip(from_svg, flat):
        assert abs(a - b) <= 1e-5 * max(1.0, abs(b))

    scalar = json.loads((out / "analysis.json").read_text())
    off = matrix[~np.eye(3, dtype=bool)]
    assert abs(scalar["mean_off_diagonal_cka"] - off.mean()) < 1e-9


def test_analyze_deterministic_csv(tmp_path, dataset):
    model = PoseLifter(ModelConfig(**TOY_MODEL), seed=4)
    ckpt = tmp_path / "m.hpkc"
    save_checkpoint(ckpt, model)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        main(["analyze", "--ckpt", str(ckpt), "--data", str(dataset),
              "--what", "cka", "--out-dir", str(out), "--clips", "4"])
    assert (out_a / "cka.csv").read_bytes() == (out_b / "cka.csv").read_bytes()
    assert (out_a / "cka.svg").read_bytes() == (out_b / "cka.svg").read_bytes()
