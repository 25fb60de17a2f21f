"""Adversarial training: fine-tune a trained model on clean plus adversarial signals."""

import math
from dataclasses import dataclass, field

import numpy as np

from .attacks import SsaConfig, fgsm_batch, ssa_batch
from .metrics import average_robustness
from .nnet import Adam, AdamConfig, accuracy, train_step
from .rng import substream

TRACE_COLUMNS = ("epoch", "clean_train_acc", "clean_test_acc", "adv_train_acc",
                 "adv_test_acc", "rho_adv")


@dataclass
class AdvTrainConfig:
    adv_epochs: int = 10
    # share of adversarial signals in each batch; 0 gives the clean fine-tuning control
    mix_ratio: float = 0.5
    regenerate: bool = False
    attack: str = "ssa"
    fgsm_eps: float = 0.5
    batch_size: int = 128
    lr: float = 1e-3
    rho_eval_size: int = 200
    ssa: SsaConfig = field(default_factory=SsaConfig)

    def __post_init__(self):
        if not 0 <= self.mix_ratio <= 1:
            raise ValueError("mix_ratio must lie in [0, 1]")
        if self.attack not in ("ssa", "fgsm"):
            raise ValueError("attack must be 'ssa' or 'fgsm'")


@dataclass
class AdversarialSet:
    X: np.ndarray
    y: np.ndarray
    source_index: np.ndarray


def make_adversarial_set(model, X, y, cfg):
    """Adversarial copies of ``X`` that keep their ground-truth labels.

    Signals on which the attack does not change the model's prediction are left
    out.
    """
    if cfg.attack == "ssa":
        res = ssa_batch(model, X, cfg.ssa)
    else:
        res = fgsm_batch(model, X, y, cfg.fgsm_eps)
    keep = np.flatnonzero(res.success & (res.pred_after != res.pred_before))
    return AdversarialSet(res.x_adv[keep], np.asarray(y)[keep], keep)


def ssa_robustness(model, X, cfg=None):
    """Average robustness of ``model`` estimated with the signal-specific attack.

    Only signals the attack succeeds on contribute; returns (rho, success rate).
    """
    res = ssa_batch(model, X, cfg or SsaConfig())
    ok = res.success
    rho = average_robustness(X[ok], res.r[ok]) if ok.any() else float("nan")
    return rho, float(ok.mean())


def robustness_curve(models, X_eval, cfg=None):
    return [ssa_robustness(m, X_eval, cfg)[0] for m in models]


def _evaluate(model, epoch, X, y, Xt, yt, adv_train, adv_test, X_rho, cfg):
    rho, _ = ssa_robustness(model, X_rho, cfg.ssa)
    return {
        "epoch": epoch,
        "clean_train_acc": accuracy(model, X, y),
        "clean_test_acc": accuracy(model, Xt, yt),
        "adv_train_acc": accuracy(model, adv_train.X, adv_train.y),
        "adv_test_acc": accuracy(model, adv_test.X, adv_test.y),
        "rho_adv": rho,
    }


def adversarial_train(model, X, y, X_test, y_test, cfg=None, seed=0, log=None,
                      adversarial_sets=None):
    """Harden a trained ``model``; the input model is not modified.

    Adversarial sets are generated from the training and test splits with the
    pre-defense model (and kept fixed unless ``cfg.regenerate``). Each epoch
    runs ``ceil(len(X) / batch_size)`` Adam steps on batches holding
    ``round(batch_size * mix_ratio)`` adversarial and the rest clean signals.

    ``adversarial_sets`` may pass a precomputed ``(train, test)`` pair of
    :class:`AdversarialSet` built from the same model.

    Returns ``(hardened, trace, checkpoints)`` where trace entry 0 describes the
    pre-defense model and ``checkpoints[e]`` is the model after epoch ``e``.
    """
    cfg = cfg or AdvTrainConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    X_test = np.asarray(X_test, dtype=float)
    y_test = np.asarray(y_test)
    model = model.copy()
    if adversarial_sets is None:
        adv_train = make_adversarial_set(model, X, y, cfg)
        adv_test = make_adversarial_set(model, X_test, y_test, cfg)
    else:
        adv_train, adv_test = adversarial_sets
    X_rho = X_test[: cfg.rho_eval_size]

    trace = [_evaluate(model, 0, X, y, X_test, y_test, adv_train, adv_test, X_rho, cfg)]
    checkpoints = [model.copy()]
    if log:
        log(trace[-1])
    opt = Adam(model, AdamConfig(lr=cfg.lr, batch_size=cfg.batch_size, epochs=cfg.adv_epochs))
    n_adv = int(round(cfg.batch_size * cfg.mix_ratio)) if len(adv_train.y) else 0
    n_clean = cfg.batch_size - n_adv
    steps = math.ceil(len(X) / cfg.batch_size)
    for epoch in range(1, cfg.adv_epochs + 1):
        if cfg.regenerate and epoch > 1:
            adv_train = make_adversarial_set(model, X, y, cfg)
            n_adv = int(round(cfg.batch_size * cfg.mix_ratio)) if len(adv_train.y) else 0
            n_clean = cfg.batch_size - n_adv
        rng = substream(seed, "advtrain", epoch)
        clean_order = rng.permutation(len(X))
        adv_order = rng.permutation(len(adv_train.y)) if n_adv else np.zeros(0, dtype=int)
        for step in range(steps):
            ci = np.take(clean_order, np.arange(step * n_clean, (step + 1) * n_clean), mode="wrap")
            parts_X, parts_y = [X[ci]], [y[ci]]
            if n_adv:
                ai = np.take(adv_order, np.arange(step * n_adv, (step + 1) * n_adv), mode="wrap")
                parts_X.append(adv_train.X[ai])
                parts_y.append(adv_train.y[ai])
            train_step(model, opt, np.concatenate(parts_X), np.concatenate(parts_y))
        trace.append(_evaluate(model, epoch, X, y, X_test, y_test, adv_train, adv_test, X_rho, cfg))
        checkpoints.append(model.copy())
        if log:
            log(trace[-1])
    model.training_config = {**model.training_config, "adversarial_training": {
        "adv_epochs": cfg.adv_epochs, "mix_ratio": cfg.mix_ratio, "attack": cfg.attack,
        "regenerate": cfg.regenerate, "seed": seed}}
    return model, trace, checkpoints


def write_trace_csv(trace, path):
    with open(path, "w") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for row in trace:
            fh.write(",".join(str(row[c]) if c == "epoch" else "%.9g" % row[c]
                              for c in TRACE_COLUMNS) + "\n")
