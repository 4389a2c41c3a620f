"""Command-line entry point: ``mvstrip {train,predict,evaluate,sweep,staple,phantom}``.

Run configuration is a JSON file; every key is optional and falls back to
the defaults below. Command-line flags override the file.

.. code-block:: json

    {
      "data_dir": "cohort/",
      "output_dir": "runs/bundle",
      "network": {"kernel_size": 7, "depth": 6, "base_filters": 32, "convs_per_level": 3},
      "training": {"batch_size": 16, "initial_lr": 1e-5, "epochs": 30,
                   "slices_per_epoch": 3000, "plateau_patience": 5,
                   "lr_factor": 0.5, "seed": 0},
      "fusion_weights": {"axial": 0.44, "coronal": 0.33, "sagittal": 0.23},
      "target_shape": [256, 256, 256],
      "target_spacing": [1.0, 1.0, 1.0],
      "val_subjects": ["sub-010", "sub-011"],
      "n_val": 3,
      "sweep": {"parameter": "f", "values": [3, 5, 7],
                "train": ["..."], "val": ["..."], "test": ["..."]},
      "deterministic": false,
      "device": "cpu"
    }

Network keys also accept the short names ``f``, ``L``, ``F1`` and ``Dl``.
Exit status is 0 on success, 1 for usage errors and 2 for runtime failures.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("mvstrip")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    data_dir: Optional[str] = None
    output_dir: Optional[str] = None
    network: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    fusion_weights: dict = field(default_factory=dict)
    target_shape: Sequence[int] = (256, 256, 256)
    target_spacing: Sequence[float] = (1.0, 1.0, 1.0)
    val_subjects: Optional[List[str]] = None
    n_val: Optional[int] = None
    sweep: dict = field(default_factory=dict)
    deterministic: bool = False
    device: str = "cpu"

    @classmethod
    def from_file(cls, path: Optional[str]) -> "RunConfig":
        if not path:
            return cls()
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown config keys in {path}: {sorted(unknown)}")
        return cls(**raw)

    def apply_flags(self, args) -> "RunConfig":
        for name in ("data_dir", "output_dir", "device"):
            if getattr(args, name, None) is not None:
                setattr(self, name, getattr(args, name))
        if getattr(args, "deterministic", False):
            self.deterministic = True
        if getattr(args, "seed", None) is not None:
            self.training = {**self.training, "seed": args.seed}
        for flag, key in (("epochs", "epochs"), ("lr", "initial_lr"), ("batch_size", "batch_size"),
                          ("slices_per_epoch", "slices_per_epoch")):
            if getattr(args, flag, None) is not None:
                self.training = {**self.training, key: getattr(args, flag)}
        return self

    def network_config(self):
        from .model import NetworkConfig

        return NetworkConfig.from_dict(self.network)

    def hyperparams(self):
        from .training import TrainingHyperparams

        return TrainingHyperparams.from_dict(self.training)

    def weights(self):
        from .inference import FusionWeights

        return FusionWeights(**self.fusion_weights)

    def resolved(self) -> dict:
        d = dataclasses.asdict(self)
        d["network"] = self.network_config().to_dict()
        d["training"] = dataclasses.asdict(self.hyperparams())
        d["fusion_weights"] = dataclasses.asdict(self.weights())
        d["target_shape"], d["target_spacing"] = list(self.target_shape), list(self.target_spacing)
        return d


def _require(value, flag):
    if value is None:
        raise UsageError(f"{flag} is required (flag or config file)")
    return value


def _device(name: str):
    import torch

    try:
        dev = torch.device(name)
    except RuntimeError as exc:
        raise UsageError(f"unknown device {name!r}") from exc
    if dev.type == "cuda" and not torch.cuda.is_available():
        raise UsageError("CUDA device requested but not available")
    return dev


def _split_validation(ids: List[str], cfg: RunConfig) -> tuple:
    if cfg.val_subjects:
        missing = set(cfg.val_subjects) - set(ids)
        if missing:
            raise UsageError(f"validation subjects not in dataset: {sorted(missing)}")
        val = [s for s in ids if s in cfg.val_subjects]
    else:
        n_val = cfg.n_val if cfg.n_val is not None else max(1, round(0.12 * len(ids)))
        val = ids[-n_val:]
    train = [s for s in ids if s not in val]
    if not train or not val:
        raise UsageError("need at least one training and one validation subject")
    return train, val


def cmd_train(args, cfg: RunConfig) -> int:
    from .training import build_slice_set, deterministic_mode, train_all
    from .volume import load_dataset

    data_dir = _require(cfg.data_dir, "--data-dir")
    out_dir = _require(cfg.output_dir, "--output-dir")
    config, hyper, weights = cfg.network_config(), cfg.hyperparams(), cfg.weights()
    device = _device(cfg.device)
    dataset = load_dataset(data_dir)
    train_ids, val_ids = _split_validation(sorted(dataset), cfg)
    shape, spacing = tuple(cfg.target_shape), tuple(cfg.target_spacing)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.json"), "w") as fh:
        json.dump({**cfg.resolved(), "train_subjects": train_ids, "val_subjects": val_ids}, fh, indent=2)
    with deterministic_mode(cfg.deterministic):
        train = build_slice_set({s: dataset[s] for s in train_ids}, shape, spacing)
        val = build_slice_set({s: dataset[s] for s in val_ids}, shape, spacing)
        train_all(train, val, config, hyper, out_dir=out_dir, target_shape=shape, target_spacing=spacing,
                  weights=weights, device=device)
    print(out_dir)
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig) -> int:
    from .errors import EmptyMaskWarning
    from .inference import ModelBundle, probability_to_native, qc_overlay, skullstrip
    from .volume import conform, load_volume, reorient, save_volume

    start = time.perf_counter()
    device = _device(cfg.device)
    bundle = ModelBundle.load(args.bundle)
    raw = load_volume(args.input)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EmptyMaskWarning)
        mask, fused = skullstrip(bundle, raw, native_grid=not args.conformed_grid, device=device)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    save_volume(mask, args.output)
    if args.probability:
        if args.conformed_grid:
            save_volume(reorient(fused.channel(1), raw.axis_codes), args.probability)
        else:
            save_volume(probability_to_native(fused, raw), args.probability)
    if args.qc:
        qc_image = conform(raw, bundle.target_shape, bundle.target_spacing) if args.conformed_grid else raw
        qc_overlay(qc_image, mask, args.qc)
    print(f"wall-clock: {time.perf_counter() - start:.2f} s", file=sys.stderr)
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .evaluation import (EvaluationResult, loocv, mask_metrics, write_metrics_table,
                             write_summary)
    from .training import deterministic_mode
    from .volume import load_dataset, load_label

    out_dir = _require(cfg.output_dir, "--output-dir")
    os.makedirs(out_dir, exist_ok=True)
    if args.loocv:
        dataset = load_dataset(_require(cfg.data_dir, "--data-dir"))
        with deterministic_mode(cfg.deterministic):
            result = loocv(dataset, cfg.network_config(), cfg.hyperparams(), n_val=cfg.n_val,
                           target_shape=tuple(cfg.target_shape), target_spacing=tuple(cfg.target_spacing),
                           weights=cfg.weights(), out_dir=os.path.join(out_dir, "folds"),
                           device=_device(cfg.device))
    else:
        if not args.pred_dir or not args.truth_dir:
            raise UsageError("evaluate needs --pred-dir and --truth-dir, or --loocv")
        truth = load_dataset(args.truth_dir)
        result = EvaluationResult([])
        for sid, (_, true_mask) in truth.items():
            path = None
            for ext in (".nii.gz", ".nii"):
                candidate = os.path.join(args.pred_dir, sid, "mask" + ext)
                if os.path.exists(candidate):
                    path = candidate
                    break
            if path is None:
                result.failed[sid] = "no predicted mask"
                continue
            result.metrics.append(mask_metrics(load_label(path), true_mask, sid))
    write_metrics_table(result.metrics, os.path.join(out_dir, "metrics.tsv"), result.failed)
    write_summary(result.summary, os.path.join(out_dir, "summary.json"), complete=result.complete,
                  failed=result.failed)
    for m in result.metrics:
        print(f"{m.subject_id}\t{m.dice:.4f}\t{m.jaccard:.4f}")
    if not result.complete:
        print(f"warning: {len(result.failed)} subject(s) failed: {sorted(result.failed)}", file=sys.stderr)
    return EXIT_OK


def _parse_values(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            out.append(int(tok))
        except ValueError as exc:
            raise UsageError(f"sweep values must be integers, got {tok!r}") from exc
    return out


def cmd_sweep(args, cfg: RunConfig) -> int:
    from .evaluation import SweepSpec, plot_sweep, sweep, write_sweep_tables
    from .training import deterministic_mode
    from .volume import load_dataset

    out_dir = _require(cfg.output_dir, "--output-dir")
    dataset = load_dataset(_require(cfg.data_dir, "--data-dir"))
    ids = sorted(dataset)
    sw = dict(cfg.sweep)
    parameter = args.param or sw.get("parameter")
    values = _parse_values(args.values) if args.values else sw.get("values")
    if not parameter or not values:
        raise UsageError("sweep needs a parameter and values (--param/--values or config 'sweep')")
    if "train" in sw:
        train, val, test = sw["train"], sw["val"], sw["test"]
    else:
        # same 13/4/9 proportions as a 26-subject selection study
        n_train = max(1, round(len(ids) * 13 / 26))
        n_val = max(1, round(len(ids) * 4 / 26))
        train, val, test = ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:]
    try:
        spec = SweepSpec(parameter, tuple(values), cfg.network_config(), tuple(train), tuple(val), tuple(test))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    os.makedirs(out_dir, exist_ok=True)
    with deterministic_mode(cfg.deterministic):
        rows = sweep(spec, dataset, cfg.hyperparams(), tuple(cfg.target_shape), tuple(cfg.target_spacing),
                     cfg.weights(), os.path.join(out_dir, "runs"), _device(cfg.device))
    table, _ = write_sweep_tables(rows, spec.parameter, out_dir)
    plot_sweep(rows, spec.parameter, os.path.join(out_dir, "sweep_boxplot.png"))
    with open(table) as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK


def cmd_staple(args, cfg: RunConfig) -> int:
    from .evaluation import compare_to_consensus, write_summary
    from .staple import staple
    from .volume import LabelVolume, Volume, load_label, save_volume

    out_dir = _require(cfg.output_dir, "--output-dir")
    os.makedirs(out_dir, exist_ok=True)
    masks = [load_label(p) for p in args.masks]
    candidate = load_label(args.candidate) if args.candidate else None
    raters = ([candidate] if candidate is not None and not args.exclude_candidate else []) + masks
    if not raters:
        raise UsageError("staple needs at least one mask")
    result = staple(raters, init_p=args.init_p, init_q=args.init_q, tol=args.tol, max_iter=args.max_iter)
    ref = raters[0]
    save_volume(LabelVolume(result.consensus(), ref.spacing, ref.axis_codes, ref.origin),
                os.path.join(out_dir, "consensus.nii.gz"))
    save_volume(Volume(result.probability, ref.spacing, ref.axis_codes, ref.origin),
                os.path.join(out_dir, "consensus_probability.nii.gz"))
    names = ([args.candidate] if candidate is not None and not args.exclude_candidate else []) + list(args.masks)
    with open(os.path.join(out_dir, "raters.tsv"), "w") as fh:
        fh.write("rater\tsensitivity\tspecificity\n")
        for name, p, q in zip(names, result.sensitivity, result.specificity):
            fh.write(f"{name}\t{p:.6f}\t{q:.6f}\n")
    extra = {"iterations": result.iterations, "converged": result.converged, "prior": result.prior}
    if candidate is not None:
        m = compare_to_consensus(candidate, masks, include_candidate=not args.exclude_candidate,
                                 init_p=args.init_p, init_q=args.init_q, tol=args.tol, max_iter=args.max_iter)
        extra.update(candidate=args.candidate, dice=m.dice, jaccard=m.jaccard)
        print(f"candidate vs consensus: dice {m.dice:.4f} jaccard {m.jaccard:.4f}")
    write_summary(None, os.path.join(out_dir, "staple.json"), **extra)
    if not result.converged:
        print(f"warning: STAPLE did not converge in {result.iterations} iterations", file=sys.stderr)
    return EXIT_OK


def cmd_phantom(args, cfg: RunConfig) -> int:
    from .phantom import PhantomSpec, make_cohort, write_cohort

    out_dir = _require(cfg.output_dir, "--output-dir")
    seed = args.seed if args.seed is not None else 0
    spec = PhantomSpec(size=args.size, noise_sigma=args.noise, bias_strength=args.bias)
    ids = write_cohort(make_cohort(args.n, spec, seed=seed), out_dir)
    print(f"wrote {len(ids)} phantoms to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the training/phantom seed")
    common.add_argument("--deterministic", action="store_true", help="force deterministic kernels")
    common.add_argument("--output-dir", dest="output_dir")
    common.add_argument("--device", help="compute device, e.g. cpu or cuda:0")
    common.add_argument("-v", "--verbose", action="store_true")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--data-dir", dest="data_dir", help="<root>/<subject>/{image,mask}.nii.gz")
    training.add_argument("--epochs", type=int)
    training.add_argument("--lr", type=float)
    training.add_argument("--batch-size", dest="batch_size", type=int)
    training.add_argument("--slices-per-epoch", dest="slices_per_epoch", type=int)

    parser = _Parser(prog="mvstrip", description="Multi-view 2D U-Net brain extraction")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common, training], help="train a three-view bundle")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="skullstrip one volume")
    p.add_argument("--bundle", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--probability", help="also write the fused brain probability here")
    p.add_argument("--qc", help="write a contour overlay PNG here")
    p.add_argument("--conformed-grid", action="store_true", help="keep outputs on the conformed grid")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common, training], help="score masks or run LOOCV")
    p.add_argument("--pred-dir")
    p.add_argument("--truth-dir")
    p.add_argument("--loocv", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common, training], help="one-parameter network sweep")
    p.add_argument("--param", help="f, L, F1 or Dl (or the full field name)")
    p.add_argument("--values", help="comma-separated integers")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("staple", parents=[common], help="STAPLE consensus of masks")
    p.add_argument("--masks", nargs="+", required=True)
    p.add_argument("--candidate", help="mask to compare against the consensus")
    p.add_argument("--exclude-candidate", action="store_true")
    p.add_argument("--init-p", type=float, default=0.99)
    p.add_argument("--init-q", type=float, default=0.99)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=100)
    p.set_defaults(func=cmd_staple)

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic phantom cohort")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--bias", type=float, default=0.2)
    p.set_defaults(func=cmd_phantom)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.from_file(args.config).apply_flags(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"mvstrip {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        from .errors import ConfigurationError

        if isinstance(exc, ConfigurationError):
            print(f"mvstrip {args.command}: configuration error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        print(f"mvstrip {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
