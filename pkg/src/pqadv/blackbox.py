"""Black-box transfer attacks through locally trained substitute models."""

from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .attacks import SsaConfig, fooling_rate, saa_universal, ssa_batch
from .errors import InsufficientData
from .nnet import BN, RELU, AdamConfig, NetworkModel, accuracy, conv, pool, train
from .rng import substream

TYPE_I, TYPE_II = 1, 2


@dataclass(frozen=True)
class SubstituteSpec:
    box_type: int  # 1: target architecture, 2: one conv block more or less
    data_ratio: Fraction
    seed: int = 0

    def __post_init__(self):
        if self.box_type not in (TYPE_I, TYPE_II):
            raise ValueError("box_type must be 1 or 2")
        object.__setattr__(self, "data_ratio", Fraction(self.data_ratio).limit_denominator(1000))
        if not 0 < self.data_ratio <= 1:
            raise ValueError("data_ratio must lie in (0, 1]")

    def to_dict(self):
        return {"box_type": self.box_type, "data_ratio": str(self.data_ratio), "seed": self.seed}


@dataclass
class TransferReport:
    spec: SubstituteSpec
    attack_kind: str
    substitute_test_acc: float
    transfer_rate: float
    # SSA only: rate over every test signal, failed substitute attacks counted as non-transfers
    transfer_rate_all: float
    substitute_fool_rate: float
    n_evaluated: int

    def to_dict(self):
        d = asdict(self)
        d["spec"] = self.spec.to_dict()
        return d


def _conv_blocks(specs):
    """(start, end) index ranges of conv1d ... maxpool1d blocks."""
    blocks, start = [], None
    for i, s in enumerate(specs):
        if s.kind == "conv1d":
            start = i
        elif s.kind == "maxpool1d" and start is not None:
            blocks.append((start, i + 1))
            start = None
    return blocks


def substitute_architecture(target_specs, spec):
    """Type I keeps the target layers; Type II drops (even seed) or adds (odd seed)
    a conv block after the last one."""
    specs = list(target_specs)
    if spec.box_type == TYPE_I:
        return specs
    blocks = _conv_blocks(specs)
    if not blocks:
        raise ValueError("target has no conv block to vary")
    start, end = blocks[-1]
    if spec.seed % 2 == 0 and len(blocks) > 1:
        return specs[:start] + specs[end:]
    last_channels = specs[start].size
    extra = [conv(2 * last_channels, 3), BN, RELU, pool(2)]
    return specs[:end] + extra + specs[end:]


def substitute_subset(y, spec, stream="substitute"):
    """Indices of the attacker's share of the training split."""
    n = int(len(y) * spec.data_ratio)
    if n < 17:
        raise InsufficientData(f"ratio {spec.data_ratio} leaves {n} signals, need at least 17")
    rng = substream(spec.seed, stream, spec.box_type, spec.data_ratio.denominator)
    idx = np.sort(rng.choice(len(y), size=n, replace=False))
    missing = set(np.unique(y)) - set(np.unique(np.asarray(y)[idx]))
    if missing:
        raise InsufficientData(f"subset misses classes {sorted(int(c) for c in missing)}")
    return idx


def train_substitute(spec, X, y, target_specs, adam=None, X_test=None, y_test=None,
                     input_length=640):
    """Train a substitute on a seeded random subset of the training split.

    Returns ``(model, subset_indices, test_accuracy)``.
    """
    idx = substitute_subset(y, spec)
    specs = substitute_architecture(target_specs, spec)
    init_seed = int(substream(spec.seed, "init", spec.box_type, spec.data_ratio.denominator)
                    .integers(2**31))
    model = NetworkModel(specs, input_length, seed=init_seed)
    model, _ = train(model, np.asarray(X)[idx], np.asarray(y)[idx], adam or AdamConfig(),
                     seed=spec.seed)
    acc = accuracy(model, X_test, y_test) if X_test is not None else float("nan")
    return model, idx, acc


def transfer_attack(substitute, target, X_test, kind, spec, substitute_test_acc=float("nan"),
                    X_attack=None, xi=1.0, delta=0.26, max_epochs=5, cfg=None, seed=0):
    """Craft adversarial signals on ``substitute`` and measure how often they fool ``target``.

    A signal counts as transferred when the target's prediction on the
    adversarial signal differs from its prediction on the clean one. For SSA
    the headline rate only covers signals the substitute attack succeeded on.
    SAA builds one universal perturbation from ``X_attack`` (the attacker's
    data) and applies it to every test signal.
    """
    X_test = np.asarray(X_test, dtype=float)
    target_clean = target.predict(X_test)
    if kind == "ssa":
        res = ssa_batch(substitute, X_test, cfg or SsaConfig())
        changed = target.predict(res.x_adv) != target_clean
        ok = res.success
        rate = float(changed[ok].mean()) if ok.any() else 0.0
        return TransferReport(spec, "ssa", substitute_test_acc, rate, float(changed.mean()),
                              float(ok.mean()), int(ok.sum()))
    if kind == "saa":
        if X_attack is None:
            raise ValueError("SAA transfer needs the attacker's signal set")
        u = saa_universal(substitute, X_attack, xi, delta, max_epochs, cfg, seed=seed)
        rate = fooling_rate(target, X_test, u.v, target_clean)
        sub_rate = fooling_rate(substitute, X_test, u.v)
        return TransferReport(spec, "saa", substitute_test_acc, rate, rate, sub_rate, len(X_test))
    raise ValueError(f"unknown attack kind {kind!r}")


def summarize(reports):
    rates = np.array([r.transfer_rate for r in reports])
    accs = np.array([r.substitute_test_acc for r in reports])
    return {
        "mean_transfer_rate": float(rates.mean()),
        "std_transfer_rate": float(rates.std()),
        "mean_substitute_acc": float(accs.mean()),
        "reports": [r.to_dict() for r in reports],
    }
