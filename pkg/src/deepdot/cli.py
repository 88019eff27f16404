"""Command-line interface: ``deepdot <command> [options]``.

Commands
--------
gen-data     simulate a dataset from a ``key = value`` experiment config
train        fit the network to a dataset and write a checkpoint
recon        reconstruct one sample (nn, lm, l1, l2) to a volume and VTK file
labels       export dataset labels as volume files for ``eval``
eval         metrics and box-plot statistics for a directory of predictions
bc-mismatch  network versus LM on data simulated with another boundary
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .errors import DOTError
from .geometry import DeltaMuVolume
from .io import (
    export_vtk,
    load_checkpoint,
    read_config,
    read_dataset,
    read_volume,
    save_checkpoint,
    write_dataset,
    write_volume,
)
from .metrics import batch_evaluate, evaluate_pair
from .pipeline import (
    ExperimentConfig,
    boundary_mismatch_experiment,
    generate_dataset,
    lm_on_sample,
    predict,
    sparse_on_sample,
    train_on_dataset,
    weighted_labels,
    with_reff,
)
from .network import standard_spec
from .recon import LMConfig, SparseConfig

TRAIN_KEYS = {"batch_size": int, "lr": float, "max_epochs": int, "patience": int}
SPEC_KEYS = {"channels": int, "fc_channels": int, "denoising_layers": int, "dropout_p": float,
             "input_noise_sigma": float}


def _experiment(path):
    return ExperimentConfig.from_mapping(read_config(path)) if path else ExperimentConfig()


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def _train_settings(path):
    """Split a training config file into network-spec and loop settings."""
    values = read_config(path) if path else {}
    unknown = set(values) - set(TRAIN_KEYS) - set(SPEC_KEYS)
    if unknown:
        raise ValueError(f"unknown training keys: {sorted(unknown)}")
    spec_kw = {k: SPEC_KEYS[k](v) for k, v in values.items() if k in SPEC_KEYS}
    loop_kw = {k: TRAIN_KEYS[k](v) for k, v in values.items() if k in TRAIN_KEYS}
    spec_kw.setdefault("channels", 8)
    return spec_kw, loop_kw


def _train(dataset, spec_path, seed, out, echo=True):
    spec_kw, loop_kw = _train_settings(spec_path)
    spec = standard_spec(dataset.inputs.shape[1], dataset.grid.shape, **spec_kw)

    def log(h):
        if echo:
            print(f"epoch {h['epoch']:3d}  train {h['train_loss']:.6g}  val {h['val_loss']:.6g}",
                  flush=True)

    spec, result = train_on_dataset(dataset, spec, seed=seed, log=log, **loop_kw)
    out = Path(out)
    save_checkpoint(out, spec, result.params, seed=seed, best_epoch=result.best_epoch,
                    best_val_loss=float(result.best_val_loss))
    _write_jsonl(out / "history.jsonl", result.history)
    plotting.training_curves(result.history, out / "training.png")
    return spec, result


def cmd_gen_data(args):
    cfg = _experiment(args.config)
    n_train = args.n_train if args.n_train is not None else (3 * args.count) // 4
    ds = generate_dataset(cfg, args.count, args.seed, n_train=n_train)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples ({ds.inputs.shape[1]} measurements) to {args.out}")


def cmd_train(args):
    _, result = _train(read_dataset(args.data), args.spec, args.seed, args.out)
    print(f"best epoch {result.best_epoch}, validation MSE {result.best_val_loss:.6g}")


def cmd_recon(args):
    ds = read_dataset(args.data)
    if not 0 <= args.index < len(ds):
        raise ValueError(f"index {args.index} outside dataset of {len(ds)} samples")
    grid = ds.grid
    if args.method == "nn":
        if not args.ckpt:
            raise ValueError("--method nn needs --ckpt")
        spec, params, _ = load_checkpoint(args.ckpt)
        values = predict(spec, params, ds.inputs[args.index].astype(np.float64))[0]
    elif args.method == "lm":
        lm = LMConfig(lambda_constant=args.lam) if args.lam is not None else LMConfig()
        values = lm_on_sample(ds, args.index, lm=lm).delta_mu.values
    else:
        kw = {"p": 1 if args.method == "l1" else 2}
        if args.lam is not None:
            kw["lambda_constant"] = args.lam
        values = sparse_on_sample(ds, args.index, SparseConfig(**kw)).delta_mu.values
    volume = DeltaMuVolume(grid, values)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_volume(volume, out)
    export_vtk(volume, out.with_suffix(".vtk"))
    print(f"wrote {out} and {out.with_suffix('.vtk')}")


def cmd_labels(args):
    ds = read_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = ds.labels.astype(np.float64)
    factors = np.ones(len(ds))
    if args.weighted:
        labels, factors = weighted_labels(labels)
    indices = args.index if args.index else range(len(ds))
    for i in indices:
        write_volume(DeltaMuVolume(ds.grid, labels[i]), out / f"sample-{i:04d}.vol",
                     scale=float(factors[i]))
    print(f"wrote {len(indices)} label volumes to {out}")


def cmd_eval(args):
    pred_dir, label_dir = Path(args.pred_dir), Path(args.label_dir)
    preds = sorted(pred_dir.glob("*.vol"))
    if not preds:
        raise FileNotFoundError(f"no .vol files in {pred_dir}")
    reports = []
    for p in preds:
        lab = label_dir / p.name
        if not lab.exists():
            raise FileNotFoundError(f"no label {lab} for prediction {p}")
        est, _ = read_volume(p)
        ref, _ = read_volume(lab)
        reports.append(evaluate_pair(est.as_array(), ref.as_array(), str(p), str(lab),
                                     data_range=args.data_range))
    summary, reports = batch_evaluate(reports)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out, [{"type": "pair", **r.to_dict()} for r in reports]
                 + [{"type": "summary", "data_range": args.data_range, **summary}])
    plotting.metric_boxplots({"estimate": [r.to_dict() for r in reports]}, out.with_suffix(".png"))
    for k, v in summary.items():
        print(f"{k:8s} median {v['median']:.4g}  q1 {v['q1']:.4g}  q3 {v['q3']:.4g}")


def cmd_bc_mismatch(args):
    cfg = _experiment(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set = generate_dataset(with_reff(cfg, args.train_reff), args.count,
                                 args.seed, n_train=(3 * args.count) // 4)
    test_set = generate_dataset(with_reff(cfg, args.test_reff), args.test_count, args.seed + 1)
    spec, result = _train(train_set, args.spec, args.seed, out / "checkpoint")
    records = []

    def log(r):
        records.append(r)
        print(f"sample {r['index']}: nn pearson {r['network']['pearson']:.3f}, "
              f"lm pearson {r['lm']['pearson']:.3f}", flush=True)

    res = boundary_mismatch_experiment(train_set, test_set, spec, result.params,
                                       LMConfig(lambda_constant=args.lam), log=log)
    groups = {k: [r.to_dict() for r in v] for k, v in res.items()}
    summary = {k: batch_evaluate(v)[0] for k, v in res.items()}
    _write_jsonl(out / "report.jsonl", records + [{"type": "summary", **summary}])
    plotting.metric_boxplots(groups, out / "report.png")
    for k in ("pearson", "ssim"):
        print(f"median {k}: network {summary['network'][k]['median']:.4f}  "
              f"lm {summary['lm'][k]['median']:.4f}")


def build_parser():
    parser = argparse.ArgumentParser(prog="deepdot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate a dataset")
    p.add_argument("--config", help="experiment config (key = value)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, help="training samples (default: 3/4 of count)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the network")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", help="network and training settings (key = value)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recon", help="reconstruct one sample")
    p.add_argument("--method", choices=("nn", "lm", "l1", "l2"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--ckpt")
    p.add_argument("--lambda", dest="lam", type=float, help="regularization constant c")
    p.add_argument("--out", required=True, help="volume path; the VTK file goes alongside")
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("labels", help="export labels as volume files")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--index", type=int, nargs="*")
    p.add_argument("--weighted", action="store_true", help="export weighted labels")
    p.set_defaults(func=cmd_labels)

    p = sub.add_parser("eval", help="batch metrics for predicted volumes")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--label-dir", required=True)
    p.add_argument("--out", required=True, help="JSONL report; a PNG box plot goes alongside")
    p.add_argument("--data-range", default="label", choices=("label", "joint"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bc-mismatch", help="network versus LM under a boundary mismatch")
    p.add_argument("--train-reff", type=float, required=True)
    p.add_argument("--test-reff", type=float, required=True)
    p.add_argument("--config")
    p.add_argument("--spec")
    p.add_argument("--count", type=int, default=400)
    p.add_argument("--test-count", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float, default=10.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bc_mismatch)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (DOTError, OSError, ValueError, KeyError) as exc:
        print(f"deepdot {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
