"""Command-line interface: ``exm synth | train | predict | eval | compare | fixture``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, SynthSpec, accuracy, auc, fixture_paths, load_csv, synth_generate, write_csv
from .model import FeatureSchema, LabelError, LossSpec, SchemaError, _check_modes, predict_batch
from .optim import ConfigError, NumericalError, TrainConfig, mean_loss, train
from .riemannian import RankDeficientError
from .storage import FormatError, load_config, load_model, model_bytes, write_json

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

MODEL_FILE = "model.ttm"
TRACE_FILE = "trace.csv"
MANIFEST_FILE = "manifest.json"
SCORES_FILE = "scores.csv"

# flag dest -> TrainConfig field
_CONFIG_FLAGS = {
    "optimizer": "optimizer",
    "rank": "rank",
    "batch": "batch_size",
    "iters": "iterations",
    "dropout_keep": "keep_prob",
    "lam": "lam",
    "seed": "seed",
    "armijo_scope": "armijo_scope",
    "init": "init",
    "loss": "loss",
    "learning_rate": "learning_rate",
    "rho": "rho",
    "c1": "c1",
    "alpha_min": "alpha_min",
    "full_loss_every": "full_loss_every",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_data_flags(p, target=True):
    p.add_argument("--schema", help="schema file (default: every column numeric)")
    if target:
        p.add_argument("--target", default="y", help="name of the target column (default: y)")


def _add_train_flags(p, with_optimizer=True):
    if with_optimizer:
        p.add_argument("--optimizer", choices=["riemannian", "core-sgd"])
    p.add_argument("--rank", type=int)
    p.add_argument("--batch", type=int, help="mini-batch size")
    p.add_argument("--iters", type=int, help="number of iterations")
    p.add_argument(
        "--dropout-keep",
        type=float,
        nargs="?",
        const=0.95,
        help="feature keep probability; the bare flag means 0.95 (default: no dropout)",
    )
    p.add_argument("--lambda", dest="lam", type=float, help="L2 regularization strength")
    p.add_argument("--seed", type=int)
    p.add_argument("--armijo-scope", choices=["batch", "full"])
    p.add_argument("--init", choices=["linear", "random"])
    p.add_argument("--loss", choices=["logistic", "squared"])
    p.add_argument("--learning-rate", type=float, help="initial step of the core-SGD baseline")
    p.add_argument("--rho", type=float, help="backtracking contraction")
    p.add_argument("--c1", type=float, help="Armijo constant")
    p.add_argument("--alpha-min", type=float)
    p.add_argument("--full-loss-every", type=int, help="log the full training loss every k iterations")
    p.add_argument("--config", help="key=value file with TrainConfig fields; explicit flags win")
    p.add_argument("--omit-wall-time", action="store_true", help="leave the wall_ms trace column empty")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="exm", description="Exponential Machines with Riemannian training.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the synthetic interaction benchmark")
    p.add_argument("--n-train", type=int, default=100_000)
    p.add_argument("--n-test", type=int, default=100_000)
    p.add_argument("--d", type=int, default=30)
    p.add_argument("--m", type=int, default=20)
    p.add_argument("--order", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--train", required=True, help="training CSV")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("predict", help="score rows with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    _add_data_flags(p)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("eval", help="AUC, accuracy, log loss and prediction speed")
    p.add_argument("--data", required=True)
    p.add_argument("--model", help="model container to score --data with")
    p.add_argument("--scores", help="scores CSV from 'predict' instead of a model")
    _add_data_flags(p)

    p = sub.add_parser("compare", help="Riemannian vs core-SGD under one budget")
    p.add_argument("--train", required=True)
    p.add_argument("--test", help="held-out CSV for the AUC column (default: training data)")
    _add_data_flags(p)
    _add_train_flags(p, with_optimizer=False)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("fixture", help="copy a bundled dataset and its schema")
    p.add_argument("--name", default="car_onehot")
    p.add_argument("--out-dir", required=True)
    return parser


def _read_schema(path) -> FeatureSchema | None:
    if path is None:
        return None
    try:
        return FeatureSchema.from_text(Path(path).read_text())
    except OSError as err:
        raise DataError(f"cannot read schema {path}: {err}") from None


def _resolve_config(args) -> TrainConfig:
    values = load_config(args.config) if args.config else {}
    for dest, name in _CONFIG_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[name] = v
    if "optimizer" in values:
        values["optimizer"] = str(values["optimizer"]).replace("-", "_")
    return TrainConfig.from_mapping(values)


def _load(path, args, cfg_loss="logistic", require_target=True):
    schema = _read_schema(args.schema)
    return load_csv(
        path,
        target_column=args.target,
        schema=schema,
        classification=cfg_loss == "logistic",
        require_target=require_target,
    )


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_entry(path, ds):
    return {"path": str(path), "fingerprint": ds.fingerprint(), "rows": ds.n_rows, "features": ds.n_features}


def _manifest(command, cfg, datasets, artifacts, schema):
    return {
        "command": command,
        "config": cfg.to_dict(),
        "seeds": {"init": cfg.seed, "minibatch_stream": [cfg.seed, 1]},
        "datasets": datasets,
        "artifacts": artifacts,
        "schema": schema.to_text(),
        "library_version": __version__,
    }


def _mean_logloss(scores, y):
    return float(np.mean(np.logaddexp(0.0, -y * scores)))


def cmd_synth(args) -> int:
    try:
        spec = SynthSpec(args.n_train, args.n_test, args.d, args.m, args.order, args.seed)
    except DataError as err:
        raise UsageError(f"invalid generator spec: {err}") from None
    train_ds, test_ds, truth = synth_generate(spec)
    out = _out_dir(args.out_dir)
    write_csv(train_ds, out / "train.csv")
    write_csv(test_ds, out / "test.csv")
    (out / "ground_truth.json").write_text(truth.to_json() + "\n")
    (out / "schema.txt").write_text(train_ds.schema.to_text())
    for name, ds in (("train", train_ds), ("test", test_ds)):
        if ds.n_rows:
            pos = float(np.mean(ds.y > 0))
            print(f"{name}: {ds.n_rows} rows, positive fraction {pos:.4f}")
        else:
            print(f"{name}: 0 rows")
    return EXIT_OK


def _train_once(cfg, ds, include_wall):
    w, trace = train(ds, cfg)
    if trace.stalled:
        print(f"warning: step size fell below alpha_min at iteration {len(trace.records)}", file=sys.stderr)
    return w, trace, trace.to_csv(include_wall=include_wall)


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    ds = _load(args.train, args, cfg.loss)
    out = _out_dir(args.out_dir)
    manifest = _manifest(
        "train",
        cfg,
        {"train": _dataset_entry(args.train, ds)},
        {"model": MODEL_FILE, "trace": TRACE_FILE},
        ds.schema,
    )
    write_json(out / MANIFEST_FILE, manifest)
    w, trace, csv_text = _train_once(cfg, ds, not args.omit_wall_time)
    (out / MODEL_FILE).write_bytes(model_bytes(w, ds.schema))
    (out / TRACE_FILE).write_text(csv_text)
    loss = mean_loss(w, ds, cfg.loss, cfg.lam)
    print(f"final training loss {loss:.6g} after {len(trace.records)} iterations, tt_ranks {list(w.tt_ranks)}")
    return EXIT_OK


def _model_and_data(args, require_target):
    w, stored = load_model(args.model)
    schema = _read_schema(args.schema) or stored
    if schema is None:
        schema = FeatureSchema.numeric(w.ndim)
    _check_modes(w, schema.mode_sizes)
    ds = load_csv(args.data, target_column=args.target, schema=schema, require_target=require_target)
    return w, ds


def cmd_predict(args) -> int:
    w, ds = _model_and_data(args, require_target=False)
    scores = predict_batch(w, ds.X, ds.schema)
    out = _out_dir(args.out_dir)
    lines = ["row_id,score"] + [f"{i},{s!r}" for i, s in enumerate(scores.tolist())]
    (out / SCORES_FILE).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def _read_scores(path, n):
    rows = Path(path).read_text().splitlines()
    if not rows or rows[0].strip() != "row_id,score":
        raise DataError(f"{path}: expected header 'row_id,score'")
    scores = np.full(n, np.nan)
    for lineno, line in enumerate(rows[1:], 2):
        try:
            i, s = line.split(",")
            scores[int(i)] = float(s)
        except (ValueError, IndexError):
            raise DataError(f"{path}:{lineno}: bad score line {line!r}") from None
    if np.isnan(scores).any():
        raise DataError(f"{path}: scores missing for some of the {n} rows")
    return scores


def cmd_eval(args) -> int:
    if (args.model is None) == (args.scores is None):
        raise UsageError("eval needs exactly one of --model or --scores")
    if args.model is not None:
        w, ds = _model_and_data(args, require_target=True)
        t0 = time.perf_counter()
        scores = predict_batch(w, ds.X, ds.schema)
        elapsed = time.perf_counter() - t0
        per_1e5 = 1000.0 * elapsed * 1e5 / max(ds.n_rows, 1)
    else:
        ds = load_csv(args.data, target_column=args.target, schema=_read_schema(args.schema))
        scores = _read_scores(args.scores, ds.n_rows)
        per_1e5 = None
    print(f"auc {auc(scores, ds.y):.6f}")
    print(f"accuracy {accuracy(scores, ds.y):.6f}")
    print(f"logloss {_mean_logloss(scores, ds.y):.6f}")
    print("ms_per_1e5_predictions " + ("n/a" if per_1e5 is None else f"{per_1e5:.3f}"))
    return EXIT_OK


def cmd_compare(args) -> int:
    base = _resolve_config(args)
    ds = _load(args.train, args, base.loss)
    test = _load(args.test, args, base.loss) if args.test else ds
    out = _out_dir(args.out_dir)
    datasets = {"train": _dataset_entry(args.train, ds)}
    if args.test:
        datasets["test"] = _dataset_entry(args.test, test)
    runs = [(name, replace(base, optimizer=name)) for name in ("riemannian", "core_sgd")]
    manifest = _manifest(
        "compare",
        base,
        datasets,
        {"table": "compare.csv", "traces": [f"trace_{name}.csv" for name, _ in runs]},
        ds.schema,
    )
    write_json(out / MANIFEST_FILE, manifest)
    rows = ["optimizer,final_train_loss,test_auc,wall_s"]
    for name, cfg in runs:
        t0 = time.perf_counter()
        w, trace, csv_text = _train_once(cfg, ds, not args.omit_wall_time)
        wall = time.perf_counter() - t0
        (out / f"trace_{name}.csv").write_text(csv_text)
        loss = mean_loss(w, ds, cfg.loss, cfg.lam)
        score = auc(predict_batch(w, test.X, test.schema), test.y)
        rows.append(f"{name},{loss!r},{score!r},{'' if args.omit_wall_time else f'{wall:.3f}'}")
    table = "\n".join(rows) + "\n"
    (out / "compare.csv").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_fixture(args) -> int:
    csv_path, schema_path = fixture_paths(args.name)
    out = _out_dir(args.out_dir)
    shutil.copyfile(csv_path, out / csv_path.name)
    shutil.copyfile(schema_path, out / schema_path.name)
    print(out / csv_path.name)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "fixture": cmd_fixture,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as err:
        print(f"exm: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SchemaError, LabelError, FormatError, OSError) as err:
        print(f"exm: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, RankDeficientError, FloatingPointError) as err:
        print(f"exm: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
