"""End-to-end experiment: data, training, attacks, transfer, defense, metrics, tables."""

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import blackbox, defense, metrics, pqgen
from .attacks import SsaConfig, apply_universal, fgsm_batch, fooling_rate, saa_universal, ssa_batch
from .errors import ConfigInvalid, MissingCell
from .nnet import AdamConfig, NetworkModel, accuracy, default_specs, save_model, train
from .rng import substream
from .tsne import tsne


@dataclass
class PipelineConfig:
    seed: int = 0
    per_class: int = 500
    snr_db: float = 30.0
    epochs: int = 15
    batch_size: int = 128
    lr: float = 1e-3
    n_attack: int = 1000
    fgsm_eps: float = 0.5
    saa_subsets: tuple = (425, 850, 1700)
    xi: float = 1.0
    delta: float = 0.26
    saa_max_epochs: int = 5
    bb_ratios: tuple = ("1/20", "1/5")
    bb_types: tuple = (1, 2)
    bb_reps: int = 3
    bb_eval: int = 500
    bb_saa_signals: int = 425
    adv_epochs: int = 10
    mix_ratio: float = 0.5
    rho_eval_size: int = 200
    tsne_points: int = 1000
    perplexity: float = 30.0
    tsne_iter: int = 1000
    nh_k: int = 5

    def __post_init__(self):
        self.saa_subsets = tuple(int(s) for s in self.saa_subsets)
        self.bb_ratios = tuple(str(Fraction(r)) for r in self.bb_ratios)
        self.bb_types = tuple(int(t) for t in self.bb_types)
        for name in ("per_class", "epochs", "batch_size", "n_attack", "bb_reps", "bb_eval",
                     "tsne_points", "tsne_iter", "nh_k", "rho_eval_size", "saa_max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigInvalid(name, "must be a positive integer")
        if self.adv_epochs < 0:
            raise ConfigInvalid("adv_epochs", "must be >= 0")
        if not self.saa_subsets or any(s < 1 for s in self.saa_subsets):
            raise ConfigInvalid("saa_subsets", "needs at least one positive size")
        if not 0 <= self.mix_ratio <= 1:
            raise ConfigInvalid("mix_ratio", "must lie in [0, 1]")
        if self.xi <= 0:
            raise ConfigInvalid("xi", "must be positive")
        if not 0 < self.delta < 1:
            raise ConfigInvalid("delta", "must lie in (0, 1)")
        if self.fgsm_eps < 0:
            raise ConfigInvalid("fgsm_eps", "must be >= 0")
        if any(t not in (1, 2) for t in self.bb_types):
            raise ConfigInvalid("bb_types", "entries must be 1 or 2")
        if any(not 0 < Fraction(r) <= 1 for r in self.bb_ratios):
            raise ConfigInvalid("bb_ratios", "entries must lie in (0, 1]")

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigInvalid(key, "unknown configuration field")
        try:
            return cls(**d)
        except ConfigInvalid:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid("config", str(exc)) from exc


SCALES = {
    "desk": {},
    "full": {"per_class": 15000, "saa_subsets": (1700, 3400, 6800, 13600)},
    # a few seconds end to end; exercises every stage on a toy problem
    "smoke": {"per_class": 8, "epochs": 2, "n_attack": 20, "saa_subsets": (17, 34),
              "saa_max_epochs": 1, "bb_ratios": ("1/2",), "bb_reps": 1, "bb_eval": 10,
              "bb_saa_signals": 17, "adv_epochs": 1, "rho_eval_size": 10, "tsne_points": 40,
              "perplexity": 5.0, "tsne_iter": 60},
}


def scale_config(scale, **overrides):
    if scale not in SCALES:
        raise ConfigInvalid("scale", f"unknown scale {scale!r}; choose from {sorted(SCALES)}")
    return PipelineConfig.from_dict({**SCALES[scale], **overrides})


def _attack_summary(X, res, kind, pred_clean):
    """Rates and robustness for one attack; robustness over successful rows only."""
    changed = res.pred_after != pred_clean
    ok = res.success & changed
    rho = metrics.average_robustness(X[ok], res.r[ok]) if ok.any() else float("nan")
    return {
        "misclassification_rate": float(changed.mean()),
        "rho_adv": rho,
        "seconds": float(res.seconds),
        "n": int(len(X)),
        "n_success": int(ok.sum()),
        "kind": kind,
    }


def _graph_summary(y_true, pred_adv):
    cm = metrics.confusion_from_predictions(y_true, pred_adv)
    graph = metrics.confusion_graph(cm)
    deg = graph.degrees()
    return cm, graph, {"degrees": deg.as_dict(), "entropy": metrics.entropy_summary(graph)}


class _Timer:
    def __init__(self, timings, log):
        self.timings, self.log = timings, log

    def __call__(self, name):
        timer = self

        class _Phase:
            def __enter__(self):
                self.t0 = time.perf_counter()
                if timer.log:
                    timer.log(f"[{name}] start")

            def __exit__(self, *exc):
                timer.timings[name] = time.perf_counter() - self.t0
                if timer.log and exc[0] is None:
                    timer.log(f"[{name}] done in {timer.timings[name]:.1f}s")

        return _Phase()


def reproduce(cfg=None, out_dir=None, log=None):
    """Run every experiment stage and return the consolidated report dict.

    With ``out_dir`` the dataset, model, hardened model, confusion matrices,
    graphs, projections, tables and ``report.json`` are written there.
    """
    cfg = cfg or PipelineConfig()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    timings = {}
    phase = _Timer(timings, log)
    report = {"scenario": "reproduce", "config": cfg.to_dict(),
              "provenance": {"config_hash": cfg.digest()}, "timings": timings, "metrics": {}}
    m = report["metrics"]

    with phase("gen"):
        ds = pqgen.build_dataset(cfg.per_class, cfg.snr_db, seed=cfg.seed)
        X, y = ds.arrays("train")
        Xt, yt = ds.arrays("test")
        if out is not None:
            pqgen.save_dataset(ds, out / "data")
    m["dataset"] = {"n_train": int(len(y)), "n_test": int(len(yt)),
                    "mean_l2_norm": float(np.mean(np.linalg.norm(np.vstack([X, Xt]), axis=1)))}

    with phase("train"):
        model = NetworkModel(default_specs(), seed=cfg.seed)
        adam = AdamConfig(lr=cfg.lr, batch_size=cfg.batch_size, epochs=cfg.epochs)
        model, trace = train(model, X, y, adam, seed=cfg.seed)
    m["train"] = {"test_acc": accuracy(model, Xt, yt), "train_acc": accuracy(model, X, y),
                  "trace": trace}
    report["provenance"]["model_digest"] = model.digest()
    if out is not None:
        save_model(model, out / "model.pqm")

    Xa, ya = Xt[: cfg.n_attack], yt[: cfg.n_attack]
    pred_a = model.predict(Xa)
    with phase("attack"):
        fg = fgsm_batch(model, Xa, ya, cfg.fgsm_eps)
        ss = ssa_batch(model, Xa, SsaConfig())
    m["fgsm"] = {**_attack_summary(Xa, fg, "fgsm", pred_a), "eps": cfg.fgsm_eps}
    m["ssa"] = _attack_summary(Xa, ss, "ssa", pred_a)
    m["ssa"]["status_counts"] = {str(s): int(np.sum(ss.status == s)) for s in (0, 1, 2)}

    with phase("universal"):
        order = substream(cfg.seed, "subset").permutation(len(y))
        sweep = []
        universal = None
        for size in cfg.saa_subsets:
            t0 = time.perf_counter()
            u = saa_universal(model, X[order[:size]], cfg.xi, cfg.delta, cfg.saa_max_epochs,
                              seed=cfg.seed)
            build = time.perf_counter() - t0
            sweep.append({"subset": size, "test_fooling_rate": fooling_rate(model, Xt, u.v),
                          "train_fooling_rate": u.training_fool_rate,
                          "v_norm": float(np.linalg.norm(u.v)), "epochs": u.epochs_used,
                          "seconds": build})
            universal = u
        sa = apply_universal(model, Xa, universal.v)
        sa.seconds += sweep[-1]["seconds"]
    m["saa_sweep"] = sweep
    m["saa"] = {**_attack_summary(Xa, sa, "saa", pred_a), "v_norm": sweep[-1]["v_norm"],
                "subset": sweep[-1]["subset"], "xi": cfg.xi}
    if out is not None:
        (out / "universal.json").write_text(json.dumps(universal.to_dict()))

    with phase("eval"):
        graphs = {}
        for kind, res in (("fgsm", fg), ("ssa", ss), ("saa", sa)):
            cm, graph, summary = _graph_summary(ya, res.pred_after)
            graphs[kind] = summary
            if out is not None:
                cm.to_csv(out / f"confusion_{kind}.csv")
                graph.to_json(out / f"graph_{kind}.json")
        m["clean_confusion"] = metrics.confusion_from_predictions(
            yt, model.predict(Xt)).counts.tolist()
    m["graphs"] = graphs

    with phase("transfer"):
        cells = []
        Xb = Xt[: cfg.bb_eval]
        for box_type in cfg.bb_types:
            for ratio in cfg.bb_ratios:
                ssa_reports, saa_reports = [], []
                for rep in range(cfg.bb_reps):
                    spec = blackbox.SubstituteSpec(box_type, Fraction(ratio), cfg.seed + rep)
                    sub, idx, acc = blackbox.train_substitute(spec, X, y, model.specs, adam,
                                                              Xt, yt)
                    ssa_reports.append(blackbox.transfer_attack(sub, model, Xb, "ssa", spec, acc))
                    saa_reports.append(blackbox.transfer_attack(
                        sub, model, Xb, "saa", spec, acc, X_attack=X[idx[: cfg.bb_saa_signals]],
                        xi=cfg.xi, delta=cfg.delta, max_epochs=cfg.saa_max_epochs,
                        seed=cfg.seed))
                cells.append({"box_type": box_type, "data_ratio": ratio,
                              "ssa": blackbox.summarize(ssa_reports),
                              "saa": blackbox.summarize(saa_reports)})
    m["blackbox"] = cells

    with phase("advtrain"):
        acfg = defense.AdvTrainConfig(adv_epochs=cfg.adv_epochs, mix_ratio=cfg.mix_ratio,
                                      batch_size=cfg.batch_size, lr=cfg.lr,
                                      rho_eval_size=cfg.rho_eval_size)
        hardened, adv_trace, _ = defense.adversarial_train(model, X, y, Xt, yt, acfg,
                                                           seed=cfg.seed)
    m["advtrain"] = adv_trace
    report["provenance"]["hardened_digest"] = hardened.digest()
    if out is not None:
        save_model(hardened, out / "hardened.pqm")
        defense.write_trace_csv(adv_trace, out / "advtrain_trace.csv")

    with phase("project"):
        Xp, yp = Xt[: cfg.tsne_points], yt[: cfg.tsne_points]
        proj = {}
        for source, data in (("raw", Xp), ("features", metrics.extract_features(model, Xp))):
            Y, kl = tsne(data, cfg.perplexity, cfg.tsne_iter, seed=cfg.seed, kl_every=50)
            p = metrics.Projection2D(Y, yp, metrics.neighborhood_hit(Y, yp, cfg.nh_k), source, kl)
            proj[source] = {"nh": p.nh, "kl_history": kl}
            if out is not None:
                p.to_csv(out / f"projection_{source}.csv")
    m["projection"] = proj

    # undefined values (e.g. test accuracy without a test split) become None, as in the JSON
    report = _clean(report)
    if out is not None:
        write_report(report, out / "report.json")
        for table_id in TABLES:
            emit_table(report, table_id, out / f"table_{table_id}.csv")
    return report


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


def timing_free(obj):
    """Copy of a report's metrics with wall-clock entries removed, for exact comparison."""
    if isinstance(obj, dict):
        return {k: timing_free(v) for k, v in obj.items() if k not in ("seconds", "timings")}
    if isinstance(obj, list):
        return [timing_free(v) for v in obj]
    return obj


def write_report(report, path):
    Path(path).write_text(json.dumps(_clean(report), indent=2, sort_keys=True) + "\n")


def load_report(path):
    return json.loads(Path(path).read_text())


# --- tables ------------------------------------------------------------------------

def _need(report, *keys):
    node = report
    trail = []
    for key in keys:
        trail.append(str(key))
        try:
            node = node[key]
        except (KeyError, IndexError, TypeError):
            raise MissingCell(f"report has no entry {'/'.join(trail)}") from None
    return node


def _comparison(report):
    header = ["attack", "rho_adv", "misclassification_rate", "seconds"]
    rows = [[k, _need(report, "metrics", k, "rho_adv"),
             _need(report, "metrics", k, "misclassification_rate"),
             _need(report, "metrics", k, "seconds")] for k in ("fgsm", "ssa", "saa")]
    return header, rows


def _saa_sweep(report):
    header = ["subset", "test_fooling_rate", "train_fooling_rate", "v_norm"]
    sweep = _need(report, "metrics", "saa_sweep")
    return header, [[_need(s, "subset"), _need(s, "test_fooling_rate"),
                     _need(s, "train_fooling_rate"), _need(s, "v_norm")] for s in sweep]


def _blackbox(report):
    header = ["box_type", "data_ratio", "substitute_acc", "ssa_transfer_mean", "ssa_transfer_std",
              "saa_transfer_mean", "saa_transfer_std"]
    rows = []
    for cell in _need(report, "metrics", "blackbox"):
        rows.append([_need(cell, "box_type"), _need(cell, "data_ratio"),
                     _need(cell, "ssa", "mean_substitute_acc"),
                     _need(cell, "ssa", "mean_transfer_rate"),
                     _need(cell, "ssa", "std_transfer_rate"),
                     _need(cell, "saa", "mean_transfer_rate"),
                     _need(cell, "saa", "std_transfer_rate")])
    return header, rows


def _advtrain(report):
    header = list(defense.TRACE_COLUMNS)
    return header, [[_need(row, c) for c in header] for row in _need(report, "metrics", "advtrain")]


def _degree(report):
    header = ["row"] + [f"C-{j}" for j in range(1, 18)]
    rows = []
    for kind in ("fgsm", "ssa", "saa"):
        deg = _need(report, "metrics", "graphs", kind, "degrees")
        for direction in ("in", "out"):
            rows.append([f"{kind}_{direction}"] + list(_need(deg, direction)))
    return header, rows


def _entropy(report):
    header = ["weighting"] + [f"{k}_{d}" for d in ("out", "in") for k in ("fgsm", "ssa", "saa")]
    rows = []
    for weighted, prefix in (("weighted", "H_w"), ("unweighted", "H")):
        rows.append([weighted] + [_need(report, "metrics", "graphs", k, "entropy", f"{prefix}_{d}")
                                  for d in ("out", "in") for k in ("fgsm", "ssa", "saa")])
    return header, rows


TABLES = {"comparison": _comparison, "saa_sweep": _saa_sweep, "blackbox": _blackbox,
          "advtrain": _advtrain, "degree": _degree, "entropy": _entropy}


def _fmt(v):
    if isinstance(v, float):
        return "%.9g" % v
    return "" if v is None else str(v)


def emit_table(report, table_id, path=None):
    """Render one table from a report as CSV text; also written to ``path`` if given."""
    if table_id not in TABLES:
        raise ConfigInvalid("table", f"unknown table {table_id!r}; choose from {sorted(TABLES)}")
    header, rows = TABLES[table_id](report)
    lines = [",".join(header)] + [",".join(_fmt(v) for v in row) for row in rows]
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def read_table(text):
    return list(csv.reader(text.splitlines()))
