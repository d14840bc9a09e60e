"""Command-line interface.

Subcommands: ingest, synth, train, eval, ablate, gradcheck. Every run
echoes its resolved configuration as JSON on stdout and writes a
machine-readable result JSON; outputs contain no timestamps, so re-running
a command from its echoed config reproduces identical files.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. ``LDC_THREADS`` caps the worker threads the ablation sweep uses.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import FeatureBundle, read_bundle, sample_few_shot, write_bundle
from .errors import ConfigError, DataError, LdcError, NumericError
from .gradcheck import run_gradcheck
from .kernels import BACKEND
from .model import load_model, save_model
from .nn import LinearLayer
from .synth import (
    SynthSpec,
    gen_synthetic,
    nearest_prototype_oracle,
    zs_accuracy,
)
from .training import (
    LossToggles,
    TrainConfig,
    confusion_csv,
    evaluate,
    train,
)

RESULT_SCHEMA_VERSION = 1


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _echo_config(command: str, config: dict) -> None:
    print(json.dumps({"command": command, "backend": BACKEND, "config": config},
                     indent=2, sort_keys=True))


def _result(command: str, config: dict, results: dict,
            artifacts: dict | None = None) -> dict:
    return {
        "schema_version": RESULT_SCHEMA_VERSION,
        "tool_version": __version__,
        "command": command,
        "backend": BACKEND,
        "config": config,
        "results": results,
        "artifacts": artifacts or {},
    }


def _load_bundle(path: str) -> FeatureBundle:
    if not Path(path).is_file():
        raise DataError(f"bundle not found: {path}")
    return read_bundle(path)


def _parse_betas(text: str) -> tuple[float, ...]:
    try:
        betas = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"could not parse fusion weights {text!r}") from None
    if len(betas) != 4:
        raise ConfigError(f"expected 4 fusion weights, got {len(betas)}")
    return betas


def _parse_branches(text: str) -> tuple[str, ...]:
    return tuple(part for part in (p.strip() for p in text.split(",")) if part)


def _parse_losses(text: str) -> LossToggles:
    return LossToggles.from_names(_parse_branches(text))


def _worker_count() -> int:
    raw = os.environ.get("LDC_THREADS", "1")
    try:
        count = int(raw)
    except ValueError:
        raise ConfigError(f"LDC_THREADS must be an integer, got {raw!r}") from None
    if count < 1:
        raise ConfigError(f"LDC_THREADS must be >= 1, got {count}")
    return count


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--shots", type=int, choices=[1, 2, 4, 8, 16], default=16)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--fusion", choices=["wf", "lf"], default="wf")
    parser.add_argument("--betas", default="0.1,0.2,0.3,0.4",
                        help="four comma-separated weighted-fusion weights")
    parser.add_argument("--lambda", dest="lam", type=float, default=1.0,
                        help="similarity-loss trade-off weight")
    parser.add_argument("--alf", default="adaptive",
                        help="fusion strategy: adaptive, fixed:<v>, icd-only, "
                             "maf-only, or sum")
    parser.add_argument("--icd-branches", default="a1,a2,a3,res",
                        help="comma subset of a1,a2,a3,res")
    parser.add_argument("--losses", default="ce_maf,ce_icd,ce_alf,sim_maf,sim_icd",
                        help="comma subset of the five loss terms")
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--temperature", type=float, default=None,
                        help="override the bundle's zero-shot temperature")
    parser.add_argument("--icd-hidden", type=int, default=256)
    parser.add_argument("--adapter-ratio", type=int, default=4)


def _train_config(args: argparse.Namespace) -> TrainConfig:
    if args.epochs < 1:
        raise ConfigError(f"--epochs must be >= 1, got {args.epochs}")
    config = TrainConfig(
        shots=args.shots,
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        lam=args.lam,
        seed=args.seed,
        fusion=args.fusion,
        betas=_parse_betas(args.betas),
        alf_strategy=args.alf,
        icd_branches=_parse_branches(args.icd_branches),
        icd_hidden=args.icd_hidden,
        adapter_ratio=args.adapter_ratio,
        toggles=_parse_losses(args.losses),
        temperature=args.temperature,
    )
    config.validate()
    return config


def cmd_ingest(args: argparse.Namespace) -> int:
    manifest_path = Path(args.manifest)
    arrays_path = Path(args.arrays)
    for path in (manifest_path, arrays_path):
        if not path.is_file():
            raise DataError(f"input not found: {path}")
    manifest = json.loads(manifest_path.read_text())
    with np.load(arrays_path) as archive:
        arrays = {name: np.asarray(archive[name], dtype=np.float64)
                  for name in archive.files}

    class_names = manifest.get("class_names")
    labels = manifest.get("labels")
    if class_names is None or labels is None:
        raise DataError("ingest manifest needs class_names and labels")
    level_names = sorted(n for n in arrays if n.startswith("level_"))
    if not level_names:
        raise DataError("arrays archive has no level_<k> feature matrices")
    levels = [arrays[f"level_{k}"] for k in range(1, len(level_names) + 1)]
    if "text_embeddings" not in arrays:
        raise DataError("arrays archive has no text_embeddings matrix")
    text = arrays["text_embeddings"]
    projector = None
    if "projector_weight" in arrays:
        projector = LinearLayer(
            arrays["projector_weight"],
            arrays.get("projector_bias", np.zeros(arrays["projector_weight"].shape[0])),
        )
    n = levels[0].shape[0]
    record_ids = manifest.get("record_ids") or [f"rec-{i:05d}" for i in range(n)]
    bundle = FeatureBundle(
        class_names=class_names,
        level_dims=tuple(lvl.shape[1] for lvl in levels),
        embedding_dim=text.shape[1],
        temperature=float(manifest.get("temperature", 100.0)),
        record_ids=record_ids,
        labels=np.asarray(labels, dtype=np.int64),
        levels=levels,
        text_embeddings=text,
        image_embeddings=arrays.get("image_embeddings"),
        projector=projector,
        test_indices=None if manifest.get("test_indices") is None
        else np.asarray(manifest["test_indices"], dtype=np.int64),
        metadata=manifest.get("metadata", {}),
    )
    bundle.validate()
    out = Path(args.out)
    config = {"manifest": str(manifest_path), "arrays": str(arrays_path),
              "out": str(out)}
    _echo_config("ingest", config)
    write_bundle(bundle, out)
    result = _result("ingest", config, {
        "records": bundle.record_count,
        "classes": bundle.class_count,
        "level_dims": list(bundle.level_dims),
    }, {"bundle": str(out)})
    _write_json(out.with_suffix(".result.json"), result)
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    if args.spec is not None:
        spec_path = Path(args.spec)
        if not spec_path.is_file():
            raise DataError(f"spec not found: {spec_path}")
        spec = SynthSpec.from_json(spec_path)
    else:
        spec = SynthSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    spec.validate()
    out = Path(args.out)
    config = {"spec": spec.to_dict(), "out": str(out)}
    _echo_config("synth", config)

    bundle, truth = gen_synthetic(spec)
    write_bundle(bundle, out)
    truth_path = out.parent / "ground_truth.json"
    _write_json(truth_path, truth.to_dict())

    oracle = {
        "prototype_accuracy": nearest_prototype_oracle(bundle, truth.prototypes),
        "zs_accuracy": zs_accuracy(bundle),
        "kappa": truth.kappa,
        "flipped_classes": truth.flipped_classes(),
    }
    result = _result("synth", config, oracle,
                     {"bundle": str(out), "ground_truth": str(truth_path)})
    _write_json(out.with_suffix(".result.json"), result)
    return 0


def _train_and_report(bundle, split, config: TrainConfig, stream: str):
    outcome = train(bundle, split, config)
    report = evaluate(bundle, split, outcome.model, stream=stream)
    return outcome, report


def cmd_train(args: argparse.Namespace) -> int:
    config = _train_config(args)
    bundle = _load_bundle(args.bundle)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {"bundle": args.bundle, "out": str(out_dir), **config.to_dict()}
    _echo_config("train", echo)

    split = sample_few_shot(bundle, config.shots, config.seed)
    outcome, report = _train_and_report(bundle, split, config, stream="alf")

    model_path = out_dir / "model.ldcm"
    save_model(outcome.model, model_path)
    _write_json(out_dir / "loss_trace.json", {"trace": outcome.loss_trace})
    _write_json(out_dir / "report.json", report.to_dict())
    (out_dir / "confusion.csv").write_text(
        confusion_csv(report.confusion, bundle.class_names)
    )
    result = _result("train", echo, {
        "accuracy": report.accuracy,
        "stream_accuracies": report.stream_accuracies,
        "confusion_score": report.confusion_score,
        "final_loss": outcome.loss_trace[-1]["loss"] if outcome.loss_trace else None,
        "n_evaluated": report.n_evaluated,
    }, {
        "model": str(model_path),
        "loss_trace": str(out_dir / "loss_trace.json"),
        "report": str(out_dir / "report.json"),
        "confusion_csv": str(out_dir / "confusion.csv"),
    })
    _write_json(out_dir / "result.json", result)
    print(f"alf accuracy {report.accuracy:.4f} "
          f"(zs {report.stream_accuracies['zs']:.4f})")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    bundle = _load_bundle(args.bundle)
    if not Path(args.model).is_file():
        raise DataError(f"model not found: {args.model}")
    model = load_model(args.model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = {
        "bundle": args.bundle,
        "model": args.model,
        "out": str(out_dir),
        "shots": args.shots,
        "seed": args.seed,
        "stream": args.stream,
        "partition": args.partition,
    }
    _echo_config("eval", config)
    split = sample_few_shot(bundle, args.shots, args.seed)
    report = evaluate(bundle, split, model, stream=args.stream,
                      partition=args.partition)
    _write_json(out_dir / "report.json", report.to_dict())
    (out_dir / "confusion.csv").write_text(
        confusion_csv(report.confusion, bundle.class_names)
    )
    result = _result("eval", config, report.to_dict(), {
        "report": str(out_dir / "report.json"),
        "confusion_csv": str(out_dir / "confusion.csv"),
    })
    _write_json(out_dir / "result.json", result)
    print(f"{args.stream} accuracy {report.accuracy:.4f} on {report.n_evaluated} records")
    return 0


ABLATION_AXES = ("modules", "fusion", "alf", "losses", "icd-branches")

_LOSS_ROWS = [
    ("ce_maf+ce_icd", ("ce_maf", "ce_icd")),
    ("ce_alf", ("ce_alf",)),
    ("ce_maf+ce_icd+ce_alf", ("ce_maf", "ce_icd", "ce_alf")),
    ("+sim_maf", ("ce_maf", "ce_icd", "ce_alf", "sim_maf")),
    ("+sim_icd", ("ce_maf", "ce_icd", "ce_alf", "sim_icd")),
    ("all", LossToggles.NAMES),
]

_BRANCH_ROWS = [
    ("a1+a3+res", ("a1", "a3", "res")),
    ("a2+a3+res", ("a2", "a3", "res")),
    ("a1+a2+res", ("a1", "a2", "res")),
    ("a1+a2+a3", ("a1", "a2", "a3")),
    ("a1+a2+a3+res", ("a1", "a2", "a3", "res")),
]

_ALF_ROWS = ["icd-only", "maf-only", "sum", "fixed:0.5", "adaptive"]


def _axis_rows(axis: str, base: TrainConfig) -> list[tuple[str, TrainConfig, str]]:
    """(variant label, training config, headline stream) per ablation row."""
    rows: list[tuple[str, TrainConfig, str]] = []
    if axis == "modules":
        rows.append(("zs", replace(base, epochs=0), "zs"))
        rows.append(("maf", replace(
            base, toggles=LossToggles.from_names(("ce_maf", "sim_maf"))), "maf"))
        rows.append(("icd", replace(
            base, toggles=LossToggles.from_names(("ce_icd", "sim_icd"))), "icd"))
        rows.append(("maf+icd", replace(
            base, alf_strategy="fixed:0.5",
            toggles=LossToggles.from_names(("ce_maf", "ce_icd", "sim_maf",
                                            "sim_icd"))), "alf"))
        rows.append(("maf+icd+alf", base, "alf"))
    elif axis == "fusion":
        rows.append(("wf-equal", replace(base, fusion="wf",
                                         betas=(0.25, 0.25, 0.25, 0.25)), "alf"))
        rows.append(("wf-preset", replace(base, fusion="wf",
                                          betas=(0.1, 0.2, 0.3, 0.4)), "alf"))
        rows.append(("lf", replace(base, fusion="lf"), "alf"))
    elif axis == "alf":
        for strategy in _ALF_ROWS:
            rows.append((strategy, replace(base, alf_strategy=strategy), "alf"))
    elif axis == "losses":
        for label, names in _LOSS_ROWS:
            rows.append((label, replace(base, toggles=LossToggles.from_names(names)),
                         "alf"))
    elif axis == "icd-branches":
        for label, branches in _BRANCH_ROWS:
            rows.append((label, replace(base, icd_branches=branches), "alf"))
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}, "
                          f"expected subset of {ABLATION_AXES}")
    return rows


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _train_config(args)
    bundle = _load_bundle(args.bundle)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    axes = _parse_branches(args.axes)
    for axis in axes:
        if axis not in ABLATION_AXES:
            raise ConfigError(f"unknown ablation axis {axis!r}, "
                              f"expected subset of {ABLATION_AXES}")
    echo = {"bundle": args.bundle, "out": str(out_dir), "axes": list(axes),
            **config.to_dict()}
    _echo_config("ablate", echo)
    split = sample_few_shot(bundle, config.shots, config.seed)

    jobs: list[tuple[str, str, TrainConfig, str]] = []
    for axis in axes:
        for label, row_config, stream in _axis_rows(axis, config):
            jobs.append((axis, label, row_config, stream))

    def run(job):
        axis, label, row_config, stream = job
        _, report = _train_and_report(bundle, split, row_config, stream)
        return {
            "axis": axis,
            "variant": label,
            "stream": stream,
            "accuracy": report.accuracy,
            **{f"acc_{k}": v for k, v in report.stream_accuracies.items()},
        }

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, jobs))
    else:
        rows = [run(job) for job in jobs]

    header = ["axis", "variant", "stream", "accuracy",
              "acc_zs", "acc_maf", "acc_icd", "acc_alf"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(
            f"{row[key]:.6f}" if isinstance(row[key], float) else str(row[key])
            for key in header
        ))
    (out_dir / "ablate.csv").write_text("\n".join(lines) + "\n")
    result = _result("ablate", echo, {"rows": rows},
                     {"csv": str(out_dir / "ablate.csv")})
    _write_json(out_dir / "result.json", result)
    for row in rows:
        print(f"{row['axis']:14s} {row['variant']:22s} "
              f"{row['stream']:4s} {row['accuracy']:.4f}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")
    if args.eps <= 0 or args.tol <= 0:
        raise ConfigError("--eps and --tol must be positive")
    config = {"seeds": args.seeds, "eps": args.eps, "tol": args.tol,
              "out": args.out}
    _echo_config("gradcheck", config)
    report = run_gradcheck(seeds=args.seeds, eps=args.eps)
    ok = report.passed(args.tol)
    for group, err in sorted(report.max_rel_err.items()):
        status = "ok" if err < args.tol else "FAIL"
        print(f"{group:18s} max rel err {err:.3e}  {status}")
    print(f"worst {report.worst:.3e} over {report.checked_params} coordinates "
          f"({'pass' if ok else 'FAIL'})")
    result = _result("gradcheck", config,
                     {**report.to_dict(), "passed": ok})
    _write_json(Path(args.out), result)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ldc",
        description="Few-shot logits deconfusion over precomputed features",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="build a .ldcf bundle from npz arrays")
    p_ingest.add_argument("--manifest", required=True,
                          help="JSON with class_names, labels, optional ids/"
                               "temperature/test_indices/metadata")
    p_ingest.add_argument("--arrays", required=True,
                          help="npz with level_<k>, text_embeddings, optional "
                               "image_embeddings and projector_weight/bias")
    p_ingest.add_argument("--out", required=True)
    p_ingest.set_defaults(func=cmd_ingest)

    p_synth = sub.add_parser("synth",
                             help="generate a planted-confusion synthetic bundle")
    p_synth.add_argument("--spec", default=None,
                         help="synthetic-spec JSON (defaults used when omitted)")
    p_synth.add_argument("--seed", type=int, default=None,
                         help="override the spec's seed")
    p_synth.add_argument("--out", required=True, help="bundle output path (.ldcf)")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="fit the deconfusion heads on an episode")
    p_train.add_argument("--bundle", required=True)
    p_train.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a trained model")
    p_eval.add_argument("--bundle", required=True)
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--out", required=True, help="output directory")
    p_eval.add_argument("--shots", type=int, choices=[1, 2, 4, 8, 16], default=16)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--stream", choices=["zs", "maf", "icd", "alf"],
                        default="alf")
    p_eval.add_argument("--partition", choices=["test", "train"], default="test")
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="accuracy table across toggled axes")
    p_ablate.add_argument("--bundle", required=True)
    p_ablate.add_argument("--out", required=True, help="output directory")
    p_ablate.add_argument("--axes", default="modules",
                          help=f"comma subset of {','.join(ABLATION_AXES)}")
    _add_train_flags(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)

    p_grad = sub.add_parser("gradcheck",
                            help="finite-difference check of all analytic gradients")
    p_grad.add_argument("--seeds", type=int, default=50)
    p_grad.add_argument("--eps", type=float, default=1e-5)
    p_grad.add_argument("--tol", type=float, default=1e-4)
    p_grad.add_argument("--out", default="gradcheck_result.json")
    p_grad.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except LdcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
