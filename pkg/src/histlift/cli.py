"""Command-line entry point: gen-data, train, eval, ablate, analyze.

All randomness flows from --seed through labeled stream derivation; a run
manifest is written into every artifact directory before any other output.
Exit codes: 0 success, 1 runtime/data error, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import data as hd
from . import tensor as ht
from . import train as htr
from .errors import ConfigError, HistliftError
from .metrics import cka_matrix, evaluate_pairs
from .model import ModelConfig, count_macs, count_params, load_checkpoint
from .svgplot import heatmap_svg
from .train import RunConfig, TrainConfig


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed, inputs) -> Path:
    """Record the resolved run before any artifact is produced."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "build": f"histlift {__version__}",
        "seed": seed,
        "config": config,
        "input_hashes": {str(p): _sha256(p) for p in inputs},
        "started_at": datetime.now(timezone.utc).isoformat(),
        "finished_at": None,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def finish_manifest(path: Path) -> None:
    manifest = json.loads(path.read_text())
    manifest["finished_at"] = datetime.now(timezone.utc).isoformat()
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _load_run_config(path) -> RunConfig:
    with open(path) as fh:
        raw = json.load(fh)
    return RunConfig.from_dict(raw)


# -- gen-data -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    skeleton = hd.Skeleton.default_human()
    camera = hd.CameraModel.default()
    clips = hd.gen_dataset(skeleton, camera, clip_count=args.clips, frames=args.frames,
                           master_seed=args.seed, sigma_px=args.sigma_px)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    hd.write_dataset(clips, out)
    print(f"wrote {len(clips)} clips ({args.frames} frames) to {out}")
    return 0


# -- train --------------------------------------------------------------------


def cmd_train(args) -> int:
    run = _load_run_config(args.config)
    clips = hd.read_dataset(args.data)
    if clips and clips[0].gt3d.shape[0] != run.model.frames:
        raise ConfigError(
            f"config frames={run.model.frames} but dataset clips have {clips[0].gt3d.shape[0]}")
    out_dir = Path(args.out_dir)
    manifest = write_manifest(out_dir, "train", run.to_dict(), args.seed,
                              [args.config, args.data])
    result = htr.train(run, clips, seed=args.seed, out_dir=out_dir,
                       resume_from=args.resume,
                       log=lambda row: print(
                           f"epoch {row['epoch']:3d}  lr {row['lr']:.3e}  "
                           f"loss {row['train_loss']:.3f}  eval {row['eval_mpjpe']:.2f} mm",
                           flush=True))
    finish_manifest(manifest)
    if result.aborted:
        print("training diverged; last good checkpoint retained", file=sys.stderr)
        return 1
    print(f"final eval MPJPE {result.history[-1]['eval_mpjpe']:.2f} mm; "
          f"checkpoint {result.checkpoint_path}")
    return 0


# -- eval ----------------------------------------------------------------------


def _per_action_csv(report) -> str:
    actions = sorted(report.per_action)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric"] + actions + ["Avg"])
    keyed = {
        "mpjpe_mm": report.mpjpe_mm,
        "p_mpjpe_mm": report.p_mpjpe_mm,
        "pck_percent": report.pck_percent,
        "auc_percent": report.auc_percent,
    }
    for metric, avg in keyed.items():
        row = [metric] + [repr(report.per_action[a][metric]) for a in actions] + [repr(avg)]
        writer.writerow(row)
    return buf.getvalue()


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    clips = hd.read_dataset(args.data)
    skeleton = hd.Skeleton.default_human()
    inputs, targets, actions = htr.prepare_clips(clips, skeleton)
    payload_extra = {}
    if args.inject_gt:
        preds = targets.copy()
        n, frames = preds.shape[0], preds.shape[1]
        flat_pred = preds.reshape(n * frames, *preds.shape[2:])
        flat_gt = targets.reshape(n * frames, *targets.shape[2:])
        report = evaluate_pairs(flat_pred, flat_gt, np.repeat(actions, frames))
    else:
        report = htr.evaluate_model(model, inputs, targets, skeleton.flip_pairs,
                                    actions=actions, flip_average=not args.no_flip)
        if not args.no_flip:
            # soft metric only: how much test-time flip averaging helped
            payload_extra["flip_averaging_gain_mm"] = htr.flip_averaging_gain(
                model, inputs, targets, skeleton.flip_pairs)
    payload = dict(report.to_dict(), **payload_extra)
    text = json.dumps(payload, sort_keys=True, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text)
    if args.per_action_csv:
        Path(args.per_action_csv).write_text(_per_action_csv(report))
    return 0


# -- ablate ----------------------------------------------------------------------


def component_grid(base: ModelConfig):
    """Backbone / +HPA / +LPA / +both on the parallel backbone."""
    combos = [("backbone", False, False), ("hpa", True, False),
              ("lpa", False, True), ("full", True, True)]
    for name, hpa_on, lpa_on in combos:
        cfg = ModelConfig(**{**base.to_dict(), "hpa_enabled": hpa_on,
                             "lpa_enabled": lpa_on, "ordering": "parallel"})
        yield name, cfg


def ordering_grid(base: ModelConfig):
    """sequential / parallel / hybrid, each with HPA off and on."""
    for ordering in ("sequential", "parallel", "hybrid"):
        for hpa_on in (False, True):
            name = f"{ordering}{'_hpa' if hpa_on else ''}"
            cfg = ModelConfig(**{**base.to_dict(), "ordering": ordering,
                                 "hpa_enabled": hpa_on, "lpa_enabled": False})
            yield name, cfg


def extent_grid(base: ModelConfig):
    """History usage: all vs first_2 vs last_2 (HPA on)."""
    for extent in ("all", "first_2", "last_2"):
        kind, _, m = extent.partition("_")
        cfg = ModelConfig(**{**base.to_dict(), "hpa_enabled": True, "lpa_enabled": False,
                             "ordering": "parallel",
                             "hpa_extent": "all" if extent == "all" else f"{kind}_m",
                             "hpa_extent_m": int(m) if m else 2})
        yield f"extent_{extent}", cfg


GRIDS = {"component": component_grid, "ordering": ordering_grid, "extent": extent_grid}

ABLATE_FIELDS = ("grid", "cell", "seed", "ordering", "hpa", "lpa", "hpa_extent",
                 "eval_mpjpe", "eval_pmpjpe", "params", "macs")


def _run_cell(job):
    """Train one (cell, seed) in its own directory; returns the CSV row."""
    grid_name, cell_name, model_cfg_dict, train_cfg_dict, seed, data_path, cell_dir = job
    cell_dir = Path(cell_dir)
    result_file = cell_dir / "result.json"
    model_cfg = ModelConfig.from_dict(model_cfg_dict)
    if result_file.exists():
        stored = json.loads(result_file.read_text())
    else:
        clips = hd.read_dataset(data_path)
        run = RunConfig(model=model_cfg, train=TrainConfig.from_dict(train_cfg_dict))
        manifest = write_manifest(cell_dir, f"ablate:{cell_name}", run.to_dict(), seed,
                                  [data_path])
        result = htr.train(run, clips, seed=seed, out_dir=cell_dir)
        finish_manifest(manifest)
        stored = {
            "eval_mpjpe": result.history[-1]["eval_mpjpe"],
            "eval_pmpjpe": result.history[-1]["eval_pmpjpe"],
            "checkpoint": result.checkpoint_path,
            "aborted": result.aborted,
        }
        result_file.write_text(json.dumps(stored, indent=2, sort_keys=True))
    return {
        "grid": grid_name,
        "cell": cell_name,
        "seed": seed,
        "ordering": model_cfg.ordering,
        "hpa": int(model_cfg.hpa_enabled),
        "lpa": int(model_cfg.lpa_enabled),
        "hpa_extent": model_cfg.hpa_extent if model_cfg.hpa_enabled else "",
        "eval_mpjpe": stored["eval_mpjpe"],
        "eval_pmpjpe": stored["eval_pmpjpe"],
        "params": count_params(model_cfg),
        "macs": count_macs(model_cfg),
    }


def cmd_ablate(args) -> int:
    with open(args.config) as fh:
        run = RunConfig.from_dict(json.load(fh))
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    if not seeds:
        raise ConfigError("--seeds must list at least one seed")
    grids = list(GRIDS) if args.grid == "all" else [args.grid]

    out_dir = Path(args.out_dir)
    manifest = write_manifest(out_dir, "ablate", run.to_dict(), seeds, [args.data])

    jobs = []
    for grid_name in grids:
        for cell_name, cfg in GRIDS[grid_name](run.model):
            for seed in seeds:
                cell_dir = out_dir / "cells" / f"{cell_name}_s{seed}"
                jobs.append((grid_name, cell_name, cfg.to_dict(), run.train.to_dict(),
                             seed, args.data, str(cell_dir)))

    workers = int(os.environ.get("HISTLIFT_THREADS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(job) for job in jobs]

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ABLATE_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    (out_dir / "sweep.csv").write_text(buf.getvalue())
    finish_manifest(manifest)
    print(f"wrote {len(rows)} rows to {out_dir / 'sweep.csv'}")
    return 0


# -- analyze ---------------------------------------------------------------------


def _collect_diag(model, inputs, batch_size=16):
    per_layer = None
    weights = None
    with ht.no_grad():
        for start in range(0, inputs.shape[0], batch_size):
            _, diag = model.forward(inputs[start:start + batch_size])
            outs = [a.reshape(-1, a.shape[-1]) for a in diag.layer_outputs]
            if per_layer is None:
                per_layer = [[o] for o in outs]
                weights = [[w.mean(axis=(1, 2, 3))] for w in diag.history_weights]
            else:
                for acc, o in zip(per_layer, outs):
                    acc.append(o)
                for acc, w in zip(weights, diag.history_weights):
                    acc.append(w.mean(axis=(1, 2, 3)))
    acts = [np.concatenate(chunks, axis=0) for chunks in per_layer]
    mean_weights = [np.mean(np.stack(chunks), axis=0) for chunks in weights]
    return acts, mean_weights


def _matrix_csv(matrix, row_prefix) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    n = len(matrix)
    writer.writerow([""] + [f"{row_prefix}{j}" for j in range(n)])
    for i, row in enumerate(matrix):
        writer.writerow([f"{row_prefix}{i}"] + [repr(float(v)) for v in row])
    return buf.getvalue()


def cmd_analyze(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    clips = hd.read_dataset(args.data)[: args.clips]
    skeleton = hd.Skeleton.default_human()
    inputs, _, _ = htr.prepare_clips(clips, skeleton)
    out_dir = Path(args.out_dir)
    manifest = write_manifest(out_dir, f"analyze:{args.what}",
                              {"ckpt": str(args.ckpt), "clips": args.clips},
                              args.seed, [args.ckpt, args.data])

    acts, mean_weights = _collect_diag(model, inputs)
    if args.what == "cka":
        matrix, mean_off = cka_matrix(acts, seed=args.seed)
        (out_dir / "cka.csv").write_text(_matrix_csv(matrix, "layer"))
        labels = [f"L{i}" for i in range(len(matrix))]
        svg = heatmap_svg([list(map(float, row)) for row in matrix],
                          row_labels=labels, col_labels=labels,
                          title="inter-layer CKA", vmin=0.0, vmax=1.0)
        (out_dir / "cka.svg").write_text(svg)
        (out_dir / "analysis.json").write_text(json.dumps(
            {"mean_off_diagonal_cka": mean_off}, indent=2))
        print(f"mean off-diagonal CKA: {mean_off:.6f}")
    else:
        if not model.config.hpa_enabled:
            raise ConfigError("attention analysis needs a checkpoint with history accumulation")
        rows = [[float(v) for v in w] for w in mean_weights]
        padded = [row + [None] * (len(rows[-1]) - len(row)) for row in rows]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        depth = len(rows[-1])
        writer.writerow(["consuming_layer"] + [f"hist{j}" for j in range(depth)])
        for i, row in enumerate(rows, start=1):
            writer.writerow([f"layer{i}"] + [repr(v) for v in row] + [""] * (depth - len(row)))
        (out_dir / "history_attention.csv").write_text(buf.getvalue())
        svg = heatmap_svg(padded, row_labels=[f"layer{i}" for i in range(1, len(rows) + 1)],
                          col_labels=[f"h{j}" for j in range(depth)],
                          title="history attention per consuming layer")
        (out_dir / "history_attention.svg").write_text(svg)
        print(f"wrote history attention maps for {len(rows)} layers")
    finish_manifest(manifest)
    return 0


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="histlift",
                                     description="history-aware 2D-to-3D pose lifting")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic HPD1 dataset")
    gen.add_argument("--clips", type=int, default=100)
    gen.add_argument("--frames", type=int, default=27)
    gen.add_argument("--sigma-px", type=float, default=2.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(fn=cmd_gen_data)

    tr = sub.add_parser("train", help="train a model from a JSON run config")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out-dir", required=True)
    tr.add_argument("--resume", default=None)
    tr.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", default=None)
    ev.add_argument("--per-action-csv", default=None)
    ev.add_argument("--no-flip", action="store_true")
    ev.add_argument("--inject-gt", action="store_true", help=argparse.SUPPRESS)
    ev.set_defaults(fn=cmd_eval)

    ab = sub.add_parser("ablate", help="run component/ordering/extent grids")
    ab.add_argument("--config", required=True)
    ab.add_argument("--data", required=True)
    ab.add_argument("--out-dir", required=True)
    ab.add_argument("--seeds", default="0,1,2")
    ab.add_argument("--grid", choices=["component", "ordering", "extent", "all"],
                    default="all")
    ab.set_defaults(fn=cmd_ablate)

    an = sub.add_parser("analyze", help="CKA or history-attention analysis")
    an.add_argument("--ckpt", required=True)
    an.add_argument("--data", required=True)
    an.add_argument("--what", choices=["cka", "attn"], required=True)
    an.add_argument("--out-dir", required=True)
    an.add_argument("--clips", type=int, default=64)
    an.add_argument("--seed", type=int, default=0)
    an.set_defaults(fn=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (HistliftError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
