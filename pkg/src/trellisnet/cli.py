"""Command-line entry points: train, eval, verify, convert, gradcheck, make-rnn.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical
divergence, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .equivalence import EquivalenceReport, embed, random_rnn, verify_equivalence
from .rnn import LstmParams, VanillaRnnParams, run_truncated
from .trellis import TrellisConfig, forward_numpy
from .training import (CopyMemoryTask, DivergenceError, LanguageModelTask, ModelSpec, OptimizerState,
                       RegularizerConfig, SequenceClassificationTask, evaluate, gradient_check,
                       init_model, train_loop)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

log = logging.getLogger("trellisnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors share the configuration-error exit code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit_json(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


# ---------------------------------------------------------------------------
# config -> task/model


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise OSError(f"{directory}: missing {stem}[.gz]")


def load_mnist_split(directory, split: str) -> data.PixelSequenceDataset:
    images, labels = MNIST_FILES[split]
    directory = Path(directory)
    return data.load_idx(_find(directory, images), _find(directory, labels))


def build_task(cfg: RunConfig, data_path: Optional[str] = None):
    """Construct the task named by ``task.kind``; ``data_path`` overrides the config path."""
    t = cfg.task
    kind = t["kind"]
    if kind == "copy":
        return CopyMemoryTask(t["delay"], t["n_train"], t["n_val"], t["batch"], t["seed"])
    path = data_path or t["paths"].get("corpus" if kind == "char" else "dir")
    if not path:
        raise ConfigError(f"task.paths needs {'corpus' if kind == 'char' else 'dir'} for {kind} tasks")
    if kind == "char":
        corpus = data.load_char_corpus(path, tuple(t["splits"]))
        return LanguageModelTask(corpus, t["batch"], t["bptt_len"], t["eval_batch"])
    sets = []
    for split, n in (("train", t["n_train"]), ("test", t["n_test"])):
        ds = load_mnist_split(path, split)
        if t["downsample"] > 1:
            ds = data.downsample(ds, t["downsample"])
        ds = data.permute_pixels(ds, t["permute_seed"]).subset(slice(0, n))
        sets.append(ds)
    return SequenceClassificationTask(sets[0], sets[1], t["batch"], t["seed"])


def build_spec(cfg: RunConfig, task) -> ModelSpec:
    m = cfg.model
    fields = task.spec_fields()
    p = m["p"]
    if fields["input_kind"] == "real":
        p = task.train.sequences.shape[1]
    trellis = TrellisConfig(p=p, q=m["q"], depth=m["depth"], dilations=m["dilations"],
                            activation=m["activation"], aux_every=m["aux_every"],
                            inject_every=m["inject_every"], weight_norm=m["weight_norm"])
    return ModelSpec(trellis, tie_weights=m["tie_weights"], **fields)


def _metric_key(task) -> str:
    return "bpc" if task.metric_name == "bpc" else "accuracy"


def _regularizer(cfg: RunConfig) -> RegularizerConfig:
    return RegularizerConfig(**cfg.regularization)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    task = build_task(cfg)
    spec = build_spec(cfg, task)
    t, o = cfg.task, cfg.optimizer
    params = init_model(spec, t["seed"])
    metrics = args.metrics or t["metrics_path"]
    ckpt_dir = args.checkpoint or t["checkpoint_dir"]
    try:
        result = train_loop(spec, params, task, _regularizer(cfg), OptimizerState(o["kind"], o["lr"]),
                            t["epochs"], seed=t["seed"], metrics_path=metrics,
                            plateau_factor=o["plateau_factor"], patience=o["patience"],
                            target_metric=t["target_metric"], max_steps=t["max_steps"],
                            log_wall_time=t["log_wall_time"])
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(ckpt_dir, result.params, {"kind": "trellis_model", "config": cfg.to_dict(),
                                              "depth": spec.trellis.depth})
    last = result.rows[-1]
    _emit_json({"epochs": last[0], "steps": result.steps, "val_loss": last[2],
                _metric_key(task): last[3], "steps_to_target": result.steps_to_target,
                "metrics": str(metrics), "checkpoint": str(ckpt_dir)})
    return EXIT_OK


def cmd_eval(args) -> int:
    params, manifest = load_checkpoint(args.checkpoint)
    if manifest.get("kind") != "trellis_model":
        raise UsageError(f"{args.checkpoint} is not a trained model checkpoint")
    cfg = RunConfig.from_dict(manifest["config"])
    task = build_task(cfg, args.data)
    spec = build_spec(cfg, task)
    expected = init_model(spec, 0)
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in params):
        mismatch = sorted(k for k in set(expected) | set(params)
                          if k not in params or k not in expected or expected[k].shape != params[k].shape)
        raise UsageError(f"checkpoint parameters do not match the configured model: {mismatch}")
    loss, metric = evaluate(params, spec, task, args.split)
    _emit_json({"split": args.split, "loss": loss, _metric_key(task): metric})
    return EXIT_OK


def _load_rnn(path):
    arrays, manifest = load_checkpoint(path)
    kind = manifest.get("kind")
    if kind == "rnn_vanilla":
        return VanillaRnnParams.from_arrays(arrays, manifest.get("nonlinearity", "tanh"))
    if kind == "rnn_lstm":
        return LstmParams.from_arrays(arrays)
    raise UsageError(f"{path} is not an RNN checkpoint (kind={kind!r})")


def _rnn_meta(rnn) -> dict:
    if isinstance(rnn, LstmParams):
        return {"kind": "rnn_lstm", "L": rnn.L, "d": rnn.d, "p": rnn.p}
    return {"kind": "rnn_vanilla", "nonlinearity": rnn.nonlinearity, "L": rnn.L, "d": rnn.d, "p": rnn.p}


def cmd_verify(args) -> int:
    if args.rnn_checkpoint or args.trellis_checkpoint:
        if not (args.rnn_checkpoint and args.trellis_checkpoint):
            raise UsageError("--rnn-checkpoint and --trellis-checkpoint go together")
        report = verify_checkpoints(args.rnn_checkpoint, args.trellis_checkpoint, args.T, args.trials, args.seed)
    else:
        for name in ("L", "d", "p", "M", "T", "trials"):
            if getattr(args, name) < 1:
                raise UsageError(f"--{name} must be >= 1")
        report = verify_equivalence(args.cell, args.L, args.d, args.p, args.M, args.T,
                                    args.trials, args.seed)
    _emit_json(report.to_dict())
    return EXIT_OK if report.passed else EXIT_VERIFY


def verify_checkpoints(rnn_path, trellis_path, T: int, trials: int, seed: int) -> EquivalenceReport:
    """Compare a converted trellis checkpoint against the RNN it came from."""
    rnn = _load_rnn(rnn_path)
    params, manifest = load_checkpoint(trellis_path)
    if manifest.get("kind") != "embedded_trellis":
        raise UsageError(f"{trellis_path} is not a converted trellis checkpoint")
    config = TrellisConfig(**manifest["trellis"])
    M, d = manifest["M"], manifest["d"]
    tol = 1e-9 if isinstance(rnn, VanillaRnnParams) else 1e-8
    cell = "lstm" if isinstance(rnn, LstmParams) else "vanilla"
    report = EquivalenceReport(cell, dict(L=rnn.L, d=rnn.d, p=rnn.p, M=M, T=T), seed, trials, tol)
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        x = rng.uniform(-1.0, 1.0, size=(rnn.p, T))
        got = forward_numpy(x, params, config).z2.data[-d:]
        report.trial_errors.append(float(np.abs(got - run_truncated(x, M, rnn)).max()))
    report.max_abs_err = max(report.trial_errors)
    return report


def cmd_convert(args) -> int:
    if args.M < 1:
        raise UsageError("--M must be >= 1")
    rnn = _load_rnn(args.rnn_checkpoint)
    try:
        emb = embed(rnn, args.M)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    c = emb.config
    meta = {"kind": "embedded_trellis", "depth": c.depth, "M": args.M, "L": emb.L, "d": emb.d,
            "cell": emb.cell, "trellis": {"p": c.p, "q": c.q, "depth": c.depth,
                                          "dilations": list(c.dilations), "activation": c.activation}}
    save_checkpoint(args.out, emb.params, meta)
    _emit_json({"out": str(args.out), "depth": c.depth, "width": c.q})
    return EXIT_OK


def cmd_make_rnn(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.cell == "vanilla":
        rnn = VanillaRnnParams.random(args.L, args.d, args.p, rng, nonlinearity=args.nonlinearity)
    else:
        rnn = random_rnn("lstm", args.L, args.d, args.p, rng)
    save_checkpoint(args.out, rnn.arrays(), _rnn_meta(rnn))
    _emit_json({"out": str(args.out), **_rnn_meta(rnn)})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradient_check(args.seed, args.q, args.depth, args.vocab, args.T, corrupt=args.corrupt_gradient)
    _emit_json(report.to_dict())
    return EXIT_OK if report.passed else EXIT_VERIFY


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="trellisnet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    tr = sub.add_parser("train", help="train a model from a JSON config")
    tr.add_argument("config")
    tr.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override a config value (JSON-parsed); repeatable")
    tr.add_argument("--metrics", help="metrics CSV path (default task.metrics_path)")
    tr.add_argument("--checkpoint", help="checkpoint directory (default task.checkpoint_dir)")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a trained checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("--data", help="corpus file or IDX directory (default: the training config's)")
    ev.add_argument("--split", default="val", choices=["train", "val", "test"])
    ev.set_defaults(func=cmd_eval)

    ve = sub.add_parser("verify", help="check trellis/truncated-RNN equivalence")
    ve.add_argument("--cell", default="vanilla", choices=["vanilla", "lstm"])
    for name, default in (("L", 2), ("d", 3), ("p", 2), ("M", 5), ("T", 12), ("trials", 20), ("seed", 0)):
        ve.add_argument(f"--{name}", type=int, default=default)
    ve.add_argument("--rnn-checkpoint", help="compare a converted checkpoint against this RNN")
    ve.add_argument("--trellis-checkpoint")
    ve.set_defaults(func=cmd_verify)

    co = sub.add_parser("convert", help="embed an RNN checkpoint into a sparse trellis")
    co.add_argument("rnn_checkpoint")
    co.add_argument("--M", type=int, required=True, help="truncation length")
    co.add_argument("--out", required=True)
    co.set_defaults(func=cmd_convert)

    mk = sub.add_parser("make-rnn", help="write a random RNN checkpoint")
    mk.add_argument("--cell", default="vanilla", choices=["vanilla", "lstm"])
    mk.add_argument("--nonlinearity", default="tanh", choices=["tanh", "sigmoid"])
    for name, default in (("L", 2), ("d", 3), ("p", 2), ("seed", 0)):
        mk.add_argument(f"--{name}", type=int, default=default)
    mk.add_argument("--out", required=True)
    mk.set_defaults(func=cmd_make_rnn)

    gc = sub.add_parser("gradcheck", help="finite-difference check of a small trellis LM")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--q", type=int, default=8)
    gc.add_argument("--depth", type=int, default=3)
    gc.add_argument("--vocab", type=int, default=5)
    gc.add_argument("--T", type=int, default=7)
    gc.add_argument("--corrupt-gradient", metavar="PARAM", help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, data.FormatError, UsageError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
