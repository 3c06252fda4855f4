"""Command line: generate benchmark data, train embeddings, evaluate them.

Workflow.  ``generate`` writes ground-truth points, train/test comparison
files, and a manifest JSON that records the full experiment setup.  ``train``
replays a manifest (or a bare config JSON with the same field names; flags
override either) and writes one embedding CSV + trace CSV per trial plus an
aggregate CSV of per-epoch median test error with quartiles.  ``evaluate``
scores an embedding against held-out comparisons and, given labels, emits a
retrieval ranking report.

Exit codes: 0 on success, 2 on usage errors (bad flags, malformed or
mismatched files), 3 on numeric failure (all trials diverged).

Reruns from the same manifest are byte-identical except the elapsed_ms
trace column: per-trial seeds derive from the optimizer seed plus the trial
index, and data generation derives its point/split/noise streams from the
synth seed by fixed offsets (+0, +1, +2).
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .core import (
    NumericError,
    UsageError,
    _atomic_write_text,
    load_comparisons,
    load_embedding,
    save_comparisons,
    save_embedding,
    validate_embedding,
)
from .losses import KINDS, LossModel
from .metrics import (
    LabeledEmbedding,
    generalization_error,
    load_labels,
    ranking_report,
)
from .optimizer import (
    METHODS,
    OUTPUT_RULES,
    DivergenceError,
    OptimizerConfig,
    run,
    write_trace_csv,
)
from .synth import SynthConfig, enumerate_triplets, generate_points, inject_noise, split

DEFAULT_K_MAX = 40
LOW_TRAIN_ERROR = 0.15


def init_embedding(n: int, d: int, seed: int, scale: float) -> np.ndarray:
    """Gaussian starting point: (n, d) draws from N(0, scale^2 * I).

    Drawn from a dedicated sub-stream of ``seed`` (spawn key 2; the
    optimizer's sampling streams use keys 0 and 1), so sharing one integer
    seed between data generation and training can never hand the optimizer
    a scaled copy of the ground-truth points as its start.
    """
    if n < 2 or d < 1:
        raise UsageError(f"init_embedding needs n >= 2 and d >= 1, got n={n}, d={d}")
    if not scale > 0:
        raise UsageError(f"init scale must be positive, got {scale}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
    return rng.standard_normal((n, d)) * scale


def _dataclass_from_dict(cls, data: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise UsageError(f"unknown {what} config keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class ExperimentSpec:
    """Everything one experiment needs: data recipe, model, optimizer, trials."""

    synth: SynthConfig
    model: LossModel
    optimizer: OptimizerConfig
    trials: int = 1
    dim: int = 10
    init_scale: float = 0.1

    def __post_init__(self) -> None:
        if not isinstance(self.trials, int) or self.trials < 1:
            raise UsageError(f"trials must be a positive integer, got {self.trials!r}")
        if not isinstance(self.dim, int) or self.dim < 1:
            raise UsageError(f"dim must be a positive integer, got {self.dim!r}")
        if not self.init_scale > 0:
            raise UsageError(f"init_scale must be positive, got {self.init_scale}")
        self.optimizer.validate()

    def to_dict(self) -> dict:
        return {
            "synth": asdict(self.synth),
            "model": asdict(self.model),
            "optimizer": self.optimizer.to_dict(),
            "trials": self.trials,
            "dim": self.dim,
            "init_scale": self.init_scale,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        known = {"synth", "model", "optimizer", "trials", "dim", "init_scale"}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(
            synth=_dataclass_from_dict(SynthConfig, data.get("synth", {}), "synth"),
            model=_dataclass_from_dict(LossModel, data.get("model", {"kind": "ste"}), "model"),
            optimizer=OptimizerConfig.from_dict(data.get("optimizer", {})),
            trials=data.get("trials", 1),
            dim=data.get("dim", 10),
            init_scale=data.get("init_scale", 0.1),
        )


def _write_json(path: str, payload: dict) -> None:
    _atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# generate


def cmd_generate(spec: ExperimentSpec, out_dir: str) -> dict:
    """Write points.csv, train.txt, test.txt, and manifest.json into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = spec.synth
    points = generate_points(cfg)
    universe = enumerate_triplets(points)
    train, test = split(universe, cfg.num_train, cfg.seed + 1)
    flipped = 0
    if cfg.noise_fraction > 0:
        flipped = int(round(cfg.noise_fraction * len(train)))
        train = inject_noise(train, cfg.noise_fraction, cfg.seed + 2)
    save_embedding(os.path.join(out_dir, "points.csv"), points)
    save_comparisons(os.path.join(out_dir, "train.txt"), train)
    files = {"points": "points.csv", "train": "train.txt", "test": None}
    if len(test):
        save_comparisons(os.path.join(out_dir, "test.txt"), test)
        files["test"] = "test.txt"
    manifest = {
        "spec": spec.to_dict(),
        "files": files,
        "counts": {
            "total": len(universe),
            "train": len(train),
            "test": len(test),
            "flipped": flipped,
            "distance_ties": universe.tie_count,
        },
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


# ---------------------------------------------------------------------------
# train


def _quantile_rows(traces_per_trial: list[list]) -> list[tuple]:
    """Per-epoch (epoch, grad_evals, median, q25, q75) of test error."""
    epochs = len(traces_per_trial[0])
    rows = []
    for e in range(epochs):
        errors = np.array([traces[e].test_error for traces in traces_per_trial])
        q25, med, q75 = (float(q) for q in np.quantile(errors, [0.25, 0.5, 0.75]))
        rows.append((e, traces_per_trial[0][e].grad_evals, med, q25, q75))
    return rows


def cmd_train(spec: ExperimentSpec, data_dir: str, out_dir: str, files: dict | None = None) -> dict:
    """Run all trials; writes per-trial embedding/trace files and aggregates.

    A diverging trial is recorded and skipped; the run only fails (raising
    the last DivergenceError) when every trial diverged.
    """
    os.makedirs(out_dir, exist_ok=True)
    if files is None:
        files = {"train": "train.txt"}
        if os.path.exists(os.path.join(data_dir, "test.txt")):
            files["test"] = "test.txt"
    n = spec.synth.n
    train = load_comparisons(os.path.join(data_dir, files["train"]), n=n)
    test = None
    if files.get("test"):
        test = load_comparisons(os.path.join(data_dir, files["test"]), n=n)
    model = spec.model.resolved(spec.dim)
    trial_records = []
    traces_ok = []
    last_divergence: DivergenceError | None = None
    for t in range(spec.trials):
        seed_t = spec.optimizer.seed + t
        X0 = init_embedding(n, spec.dim, seed_t, spec.init_scale)
        cfg_t = replace(spec.optimizer, seed=seed_t)
        record: dict = {"trial": t, "seed": seed_t}
        try:
            X_out, traces = run(model, train, test, X0, cfg_t)
        except DivergenceError as exc:
            last_divergence = exc
            record.update({"status": "diverged", "epoch": exc.epoch})
            trial_records.append(record)
            print(f"trial {t}: diverged at epoch {exc.epoch}")
            continue
        emb_name = f"trial_{t:02d}_embedding.csv"
        trace_name = f"trial_{t:02d}_trace.csv"
        save_embedding(os.path.join(out_dir, emb_name), X_out)
        write_trace_csv(os.path.join(out_dir, trace_name), traces)
        reached = next((tr.elapsed_ms for tr in traces if tr.train_error <= LOW_TRAIN_ERROR), None)
        record.update(
            {
                "status": "ok",
                "embedding": emb_name,
                "trace": trace_name,
                "final_train_error": traces[-1].train_error if traces else math.nan,
                "final_test_error": traces[-1].test_error if traces else math.nan,
                "ms_to_low_train_error": reached,
            }
        )
        trial_records.append(record)
        traces_ok.append(traces)
        if traces:
            print(
                f"trial {t}: train_error={traces[-1].train_error:.4f} "
                f"test_error={traces[-1].test_error:.4f} eta_final={traces[-1].eta:.5g}"
            )
        else:
            print(f"trial {t}: 0 epochs, embedding equals the initialization")
    summary = {
        "trials": trial_records,
        "succeeded": sum(1 for r in trial_records if r["status"] == "ok"),
        "diverged": sum(1 for r in trial_records if r["status"] == "diverged"),
        "low_train_error_threshold": LOW_TRAIN_ERROR,
    }
    if traces_ok and traces_ok[0]:
        lines = ["epoch,grad_evals,test_error_median,test_error_q25,test_error_q75"]
        for epoch, evals, med, q25, q75 in _quantile_rows(traces_ok):
            lines.append(f"{epoch},{evals},{med!r},{q25!r},{q75!r}")
        _atomic_write_text(os.path.join(out_dir, "aggregate.csv"), "\n".join(lines) + "\n")
        summary["aggregate"] = "aggregate.csv"
    _write_json(os.path.join(out_dir, "train_summary.json"), summary)
    if last_divergence is not None and summary["succeeded"] == 0:
        raise last_divergence
    return summary


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(
    embedding_path: str,
    test_path: str | None = None,
    labels_path: str | None = None,
    want_map: bool = False,
    k_max: int | None = None,
    out_path: str | None = None,
) -> dict:
    """Score an embedding; returns (and optionally writes) the report dict."""
    if want_map and labels_path is None:
        raise UsageError("--map needs a labels file (--labels)")
    if test_path is None and labels_path is None:
        raise UsageError("nothing to evaluate: pass --test and/or --labels")
    X = validate_embedding(load_embedding(embedding_path))
    n = X.shape[0]
    report: dict = {"n": n, "d": X.shape[1], "embedding": embedding_path}
    if test_path is not None:
        comparisons = load_comparisons(test_path, n=n)
        report["num_comparisons"] = len(comparisons)
        report["generalization_error"] = generalization_error(X, comparisons)
    if labels_path is not None:
        labeled = LabeledEmbedding(X, load_labels(labels_path, n=n))
        chosen_k = k_max if k_max is not None else min(DEFAULT_K_MAX, n - 1)
        ranking = ranking_report(labeled, chosen_k)
        report["ranking"] = ranking.to_dict()
    if out_path is not None:
        _write_json(out_path, report)
        if labels_path is not None:
            stem, _ = os.path.splitext(out_path)
            lines = ["k,precision,recall"]
            rank = report["ranking"]
            for k, p, r in zip(rank["k_values"], rank["precision_at_k"], rank["recall_at_k"]):
                lines.append(f"{k},{p!r},{r!r}")
            _atomic_write_text(stem + "_pr.csv", "\n".join(lines) + "\n")
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return report


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ordembed",
        description="Learn low-dimensional embeddings from relative similarity comparisons.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic benchmark dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n", type=int, default=100, help="number of objects")
    g.add_argument("--d-true", type=int, default=10, help="ground-truth dimension")
    g.add_argument("--variance", type=float, default=0.05, help="coordinate variance")
    g.add_argument("--num-train", type=int, default=10_000, help="training comparisons")
    g.add_argument("--noise-fraction", type=float, default=0.0, help="fraction of flipped training comparisons")
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="fit embeddings from comparison files")
    t.add_argument("--config", help="manifest.json or config JSON (flags override it)")
    t.add_argument("--data", help="directory with train.txt/test.txt (default: config dir)")
    t.add_argument("--out", help="output directory (default: data directory)")
    t.add_argument("--model", choices=list(KINDS))
    t.add_argument("--delta", type=float, help="ckl probability regularizer")
    t.add_argument("--alpha", type=float, help="tste degrees of freedom (default dim - 1)")
    t.add_argument("--method", choices=list(METHODS))
    t.add_argument("--epsilon", type=float)
    t.add_argument("--m", type=int, help="inner-loop length (default: training-set size)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--eta0", type=float)
    t.add_argument("--trials", type=int)
    t.add_argument("--dim", type=int, help="embedding dimension")
    t.add_argument("--init-scale", type=float)
    t.add_argument("--output-rule", choices=list(OUTPUT_RULES))
    t.add_argument("--seed", type=int, help="base optimizer seed (trial t uses seed + t)")

    e = sub.add_parser("evaluate", help="score an embedding")
    e.add_argument("--embedding", required=True)
    e.add_argument("--test", help="held-out comparison file")
    e.add_argument("--labels", help="labels CSV (index,label per line)")
    e.add_argument("--map", action="store_true", help="require retrieval metrics (needs --labels)")
    e.add_argument("--k-max", type=int, help=f"ranking depth (default min({DEFAULT_K_MAX}, n-1))")
    e.add_argument("--out", help="report JSON path (also writes <out>_pr.csv with labels)")
    return parser


def _spec_from_train_args(
    args: argparse.Namespace,
) -> tuple[ExperimentSpec, str, str, dict | None]:
    files = None
    if args.config:
        raw = _read_json(args.config)
        if "spec" in raw:
            spec = ExperimentSpec.from_dict(raw["spec"])
            files = raw.get("files")
        else:
            spec = ExperimentSpec.from_dict(raw)
        config_dir = os.path.dirname(os.path.abspath(args.config))
    else:
        spec = ExperimentSpec(
            synth=SynthConfig(), model=LossModel("ste"), optimizer=OptimizerConfig()
        )
        config_dir = None
    data_dir = args.data or config_dir
    if data_dir is None:
        raise UsageError("train needs --config or --data to locate the comparison files")
    out_dir = args.out or data_dir

    model_kwargs = {}
    if args.model is not None:
        model_kwargs["kind"] = args.model
    if args.delta is not None:
        model_kwargs["delta"] = args.delta
    if args.alpha is not None:
        model_kwargs["alpha"] = args.alpha
    if model_kwargs:
        base = asdict(spec.model)
        if "kind" in model_kwargs and model_kwargs["kind"] != base["kind"]:
            base = {"kind": model_kwargs["kind"]}  # new family: drop stale alpha
        base.update(model_kwargs)
        spec.model = _dataclass_from_dict(LossModel, base, "model")

    opt_overrides = {
        name: getattr(args, attr)
        for name, attr in (
            ("method", "method"),
            ("epsilon", "epsilon"),
            ("m", "m"),
            ("epochs", "epochs"),
            ("eta0", "eta0"),
            ("seed", "seed"),
            ("output_rule", "output_rule"),
        )
        if getattr(args, attr) is not None
    }
    if opt_overrides:
        spec.optimizer = OptimizerConfig.from_dict({**spec.optimizer.to_dict(), **opt_overrides})
    if args.trials is not None:
        spec.trials = args.trials
    if args.dim is not None:
        spec.dim = args.dim
    if args.init_scale is not None:
        spec.init_scale = args.init_scale
    spec = ExperimentSpec(**{f.name: getattr(spec, f.name) for f in fields(ExperimentSpec)})
    return spec, data_dir, out_dir, files


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "generate":
            spec = ExperimentSpec(
                synth=SynthConfig(
                    n=args.n,
                    d_true=args.d_true,
                    variance=args.variance,
                    num_train=args.num_train,
                    noise_fraction=args.noise_fraction,
                    seed=args.seed,
                ),
                model=LossModel("ste"),
                optimizer=OptimizerConfig(),
                dim=args.d_true,
            )
            manifest = cmd_generate(spec, args.out)
            counts = manifest["counts"]
            print(
                f"wrote {args.out}: {counts['train']} train / {counts['test']} test "
                f"comparisons ({counts['flipped']} flipped)"
            )
        elif args.command == "train":
            spec, data_dir, out_dir, files = _spec_from_train_args(args)
            summary = cmd_train(spec, data_dir, out_dir, files)
            print(f"{summary['succeeded']}/{len(summary['trials'])} trials ok -> {out_dir}")
        else:
            cmd_evaluate(
                args.embedding,
                test_path=args.test,
                labels_path=args.labels,
                want_map=args.map,
                k_max=args.k_max,
                out_path=args.out,
            )
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
