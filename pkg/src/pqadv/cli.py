"""Command-line interface: ``pqadv <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

import argparse
import json
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import blackbox, defense, metrics, pipeline, pqgen
from .attacks import SsaConfig, UniversalPerturbation, fgsm_batch, fooling_rate, saa_universal, \
    ssa_batch
from .errors import ConfigInvalid, PqadvError
from .nnet import AdamConfig, NetworkModel, accuracy, default_specs, load_model, save_model, train
from .rng import substream
from .tsne import tsne

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

ADV_COLUMNS = ("orig_label", "pred_before", "pred_after", "l2_r", "iters")


# --- helpers ------------------------------------------------------------------------

def _existing(args, name, flag):
    path = getattr(args, name)
    if path is None or not Path(path).exists():
        raise ConfigInvalid(flag, f"path {path!r} does not exist")
    return Path(path)


def _model(args, name="model", flag="--model"):
    return load_model(_existing(args, name, flag))


def _data(args):
    return pqgen.load_dataset(_existing(args, "data", "--data"))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(pipeline._clean(obj), indent=2, sort_keys=True) + "\n")


def _record_config(args, out):
    """Store the fully resolved arguments next to (or inside) the output."""
    out = Path(out)
    target = out / "run_config.json" if out.is_dir() else out.with_name(out.name + ".config.json")
    resolved = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    _write_json(target, resolved)


def _limit(n, split_X):
    return split_X if n is None else split_X[:n]


# --- subcommands ----------------------------------------------------------------------

def cmd_gen(args):
    ds = pqgen.build_dataset(args.per_class, args.snr, seed=args.seed)
    pqgen.save_dataset(ds, args.out)
    _record_config(args, args.out)
    return {"n_train": len(ds.train), "n_test": len(ds.test)}


def cmd_train(args):
    ds = _data(args)
    X, y = ds.arrays("train")
    Xt, yt = ds.arrays("test")
    model = NetworkModel(default_specs(), ds.grid.n_samples, seed=args.seed)
    adam = AdamConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs)
    model, trace = train(model, X, y, adam, seed=args.seed, X_test=Xt, y_test=yt,
                         log=None if args.quiet else lambda e: print(json.dumps(e), file=sys.stderr))
    save_model(model, args.out)
    _record_config(args, args.out)
    return {"test_acc": trace[-1]["test_acc"], "model_digest": model.digest()}


def cmd_attack(args):
    model = _model(args)
    ds = _data(args)
    X, y = ds.arrays(args.split)
    X, y = _limit(args.n, X), _limit(args.n, y)
    if args.method == "fgsm":
        res = fgsm_batch(model, X, y, args.eps)
    else:
        res = ssa_batch(model, X, SsaConfig(max_iter=args.max_iter, overshoot=args.overshoot))
    extra = {"orig_label": y, "pred_before": res.pred_before, "pred_after": res.pred_after,
             "l2_r": res.l2, "iters": res.iterations}
    pqgen.write_signals_csv(args.out, res.x_adv, y, extra)
    _record_config(args, args.out)
    changed = res.pred_after != res.pred_before
    ok = res.success & changed
    rho = metrics.average_robustness(X[ok], res.r[ok]) if ok.any() else float("nan")
    return {"method": args.method, "misclassification_rate": float(changed.mean()),
            "rho_adv": rho, "seconds": res.seconds, "n": len(X)}


def cmd_universal(args):
    model = _model(args)
    ds = _data(args)
    X, _ = ds.arrays("train")
    Xt, _ = ds.arrays("test")
    order = substream(args.seed, "subset").permutation(len(X))
    u = saa_universal(model, X[order[: args.subset]], args.xi, args.delta, args.max_epochs,
                      seed=args.seed)
    _write_json(args.out, u.to_dict())
    _record_config(args, args.out)
    return {"training_fool_rate": u.training_fool_rate,
            "test_fooling_rate": fooling_rate(model, Xt, u.v),
            "l2_norm": float(np.linalg.norm(u.v)), "epochs_used": u.epochs_used}


def cmd_transfer(args):
    target = _model(args, "target", "--target")
    ds = _data(args)
    X, y = ds.arrays("train")
    Xt, yt = ds.arrays("test")
    Xe = _limit(args.n, Xt)
    ratio = Fraction(1, args.ratio)
    adam = AdamConfig(epochs=args.epochs)
    reports = []
    for rep in range(args.reps):
        spec = blackbox.SubstituteSpec(args.type, ratio, args.seed + rep)
        sub, idx, acc = blackbox.train_substitute(spec, X, y, target.specs, adam, Xt, yt,
                                                  target.input_length)
        reports.append(blackbox.transfer_attack(
            sub, target, Xe, args.method, spec, acc, X_attack=X[idx[: args.saa_signals]],
            xi=args.xi, delta=args.delta, seed=args.seed))
    summary = {"box_type": args.type, "data_ratio": str(ratio), "method": args.method,
               **blackbox.summarize(reports)}
    _write_json(args.out, summary)
    _record_config(args, args.out)
    return {k: v for k, v in summary.items() if k != "reports"}


def cmd_advtrain(args):
    model = _model(args)
    ds = _data(args)
    X, y = ds.arrays("train")
    Xt, yt = ds.arrays("test")
    cfg = defense.AdvTrainConfig(adv_epochs=args.epochs, mix_ratio=args.mix,
                                 regenerate=args.regenerate, attack=args.method,
                                 rho_eval_size=args.rho_n)
    hardened, trace, _ = defense.adversarial_train(model, X, y, Xt, yt, cfg, seed=args.seed)
    save_model(hardened, args.out)
    if args.trace:
        defense.write_trace_csv(trace, args.trace)
    _record_config(args, args.out)
    return trace[-1]


def cmd_eval(args):
    model = _model(args)
    path = _existing(args, "adv", "--adv")
    X, labels, extra = pqgen.read_signals_csv(path, model.input_length)
    reference = extra.get("orig_label", labels).astype(np.int64)
    cm = metrics.confusion_matrix(model, X, reference)
    graph = metrics.confusion_graph(cm, args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cm.to_csv(out / "confusion.csv")
    graph.to_json(out / "graph.json")
    summary = {"degrees": graph.degrees().as_dict(), "entropy": metrics.entropy_summary(graph),
               "accuracy": float(np.mean(model.predict(X) == reference))}
    _write_json(out / "summary.json", summary)
    _record_config(args, out)
    return summary["entropy"]


def cmd_project(args):
    model = _model(args)
    ds = _data(args)
    X, y = ds.arrays(args.split)
    X, y = X[: args.n], y[: args.n]
    data = X if args.source == "raw" else metrics.extract_features(model, X)
    Y, kl = tsne(data, args.perplexity, args.iters, seed=args.seed, kl_every=50)
    proj = metrics.Projection2D(Y, y, metrics.neighborhood_hit(Y, y, args.k), args.source, kl)
    proj.to_csv(args.out)
    _record_config(args, args.out)
    return {"source": args.source, "nh": proj.nh, "final_kl": kl[-1][1]}


def cmd_reproduce(args):
    overrides = dict(args.overrides or {})
    overrides["seed"] = args.seed
    cfg = pipeline.scale_config(args.scale, **overrides)
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    report = pipeline.reproduce(cfg, args.out, log=log)
    _record_config(args, args.out)
    m = report["metrics"]
    return {"test_acc": m["train"]["test_acc"],
            "ssa_rate": m["ssa"]["misclassification_rate"], "ssa_rho": m["ssa"]["rho_adv"],
            "fgsm_rho": m["fgsm"]["rho_adv"],
            "saa_test_fooling_rate": m["saa_sweep"][-1]["test_fooling_rate"],
            "report": str(Path(args.out) / "report.json")}


def cmd_table(args):
    report = pipeline.load_report(_existing(args, "report", "--report"))
    text = pipeline.emit_table(report, args.table, args.out)
    if args.out is None:
        sys.stdout.write(text)
    return None


# --- parser -----------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="pqadv", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="cap on BLAS threads (default: $PQADV_THREADS)")
    parser.add_argument("--config", default=None, help="JSON file whose keys override flags")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--quiet", action="store_true")
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "synthesize a labeled dataset")
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--snr", type=float, default=30.0)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train the classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", required=True)

    p = add("attack", cmd_attack, "craft per-signal adversarial signals")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("fgsm", "ssa"), default="ssa")
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--overshoot", type=float, default=0.02)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("universal", cmd_universal, "build a universal perturbation")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--xi", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=0.26)
    p.add_argument("--subset", type=int, default=1700)
    p.add_argument("--max-epochs", type=int, default=5)
    p.add_argument("--out", required=True)

    p = add("transfer", cmd_transfer, "black-box transfer through substitutes")
    p.add_argument("--target", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--type", type=int, choices=(1, 2), default=1)
    p.add_argument("--ratio", type=int, default=20, help="attacker holds 1/RATIO of the data")
    p.add_argument("--method", choices=("ssa", "saa"), default="ssa")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--n", type=int, default=500, help="test signals to evaluate")
    p.add_argument("--saa-signals", type=int, default=425)
    p.add_argument("--xi", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=0.26)
    p.add_argument("--out", required=True)

    p = add("advtrain", cmd_advtrain, "adversarial training")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--mix", type=float, default=0.5)
    p.add_argument("--method", choices=("ssa", "fgsm"), default="ssa")
    p.add_argument("--regenerate", action="store_true")
    p.add_argument("--rho-n", type=int, default=200)
    p.add_argument("--trace", default=None)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "confusion matrix, graph and entropies of adversarial signals")
    p.add_argument("--model", required=True)
    p.add_argument("--adv", required=True)
    p.add_argument("--threshold", type=float, default=1.0 / 17)
    p.add_argument("--out", required=True)

    p = add("project", cmd_project, "t-SNE projection and neighborhood hit")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--source", choices=("raw", "features"), default="features")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)

    p = add("reproduce", cmd_reproduce, "run the full experiment and write report.json")
    p.add_argument("--scale", choices=sorted(pipeline.SCALES), default="desk")
    p.add_argument("--out", required=True)
    p.set_defaults(overrides=None)

    p = add("table", cmd_table, "render one table from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--table", choices=sorted(pipeline.TABLES), required=True)
    p.add_argument("--out", default=None)
    return parser


def _apply_config(args, path):
    """Overlay JSON keys onto parsed flags; ``reproduce`` forwards unknown keys to its config."""
    try:
        overrides = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigInvalid("--config", f"cannot read {path}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise ConfigInvalid("--config", "must contain a JSON object")
    extra = {}
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest in ("func", "command", "config"):
            raise ConfigInvalid(key, "cannot be set from a config file")
        if hasattr(args, dest):
            setattr(args, dest, value)
        elif args.command == "reproduce":
            extra[dest] = value
        else:
            raise ConfigInvalid(key, f"unknown option for {args.command}")
    if args.command == "reproduce":
        args.overrides = extra


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            _apply_config(args, args.config)
        threads = args.threads or os.environ.get("PQADV_THREADS")
        if threads is not None:
            try:
                threads = int(threads)
            except ValueError:
                raise ConfigInvalid("--threads", f"not an integer: {threads!r}") from None
            if threads < 1:
                raise ConfigInvalid("--threads", "must be >= 1")
        with threadpool_limits(limits=threads):
            result = args.func(args)
    except ConfigInvalid as exc:
        print(f"pqadv: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PqadvError, OSError, ValueError) as exc:
        print(f"pqadv {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if result is not None:
        print(json.dumps(pipeline._clean(result), sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
