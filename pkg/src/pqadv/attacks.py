"""White-box attacks: FGSM, signal-specific (SSA) and universal (SAA) perturbations.

Every attack works on any model exposing ``predict``, ``logits``,
``logit_jacobian`` and ``loss_input_gradient`` over batches of flat signals,
as :class:`pqadv.nnet.NetworkModel` does. Models are only read, never
modified.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGradient, EmptySet, NotConverged
from .rng import substream

SUCCESS, NOT_CONVERGED, DEGENERATE = 0, 1, 2


@dataclass
class Perturbation:
    r: np.ndarray
    l2_norm: float
    linf_norm: float
    iterations: int
    attack_kind: str

    @classmethod
    def of(cls, r, iterations, kind):
        r = np.asarray(r, dtype=float)
        return cls(r, float(np.linalg.norm(r)), float(np.abs(r).max(initial=0.0)),
                   int(iterations), kind)


@dataclass
class UniversalPerturbation:
    v: np.ndarray
    xi: float
    delta: float
    training_fool_rate: float
    epochs_used: int
    history: list = field(default_factory=list)

    def to_dict(self):
        return {
            "xi": self.xi,
            "delta": self.delta,
            "training_fool_rate": self.training_fool_rate,
            "epochs_used": self.epochs_used,
            "l2_norm": float(np.linalg.norm(self.v)),
            "history": self.history,
            "v": [float(x) for x in self.v],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["v"], dtype=float), d["xi"], d["delta"],
                   d["training_fool_rate"], d["epochs_used"], d.get("history", []))


@dataclass
class SsaConfig:
    max_iter: int = 50
    overshoot: float = 0.02
    grad_floor: float = 1e-10
    chunk: int = 32

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.overshoot < 0 or self.grad_floor <= 0:
            raise ValueError("overshoot must be >= 0 and grad_floor > 0")


@dataclass
class AttackResult:
    """Batch attack output; row i of every array belongs to input signal i."""

    kind: str
    x_adv: np.ndarray
    r: np.ndarray
    iterations: np.ndarray
    status: np.ndarray
    pred_before: np.ndarray
    pred_after: np.ndarray
    seconds: float = 0.0

    @property
    def success(self):
        return self.status == SUCCESS

    @property
    def l2(self):
        return np.linalg.norm(self.r, axis=1)

    def perturbation(self, i):
        return Perturbation.of(self.r[i], self.iterations[i], self.kind)


def _as_rows(X):
    X = np.asarray(X, dtype=float)
    return X[None, :] if X.ndim == 1 else X


# --- FGSM ---------------------------------------------------------------------

def fgsm_batch(model, X, labels, eps, chunk=256):
    """x + eps * sign(grad_x loss(x, true label)) for every row of ``X``."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    X = _as_rows(X)
    labels = np.asarray(labels)
    t0 = time.perf_counter()
    grads = np.concatenate([model.loss_input_gradient(X[i:i + chunk], labels[i:i + chunk])
                            for i in range(0, len(X), chunk)])
    r = eps * np.sign(grads.astype(float))
    x_adv = X + r
    seconds = time.perf_counter() - t0
    before = model.predict(X)
    after = model.predict(x_adv)
    n = len(X)
    return AttackResult("fgsm", x_adv, r, np.ones(n, dtype=int), np.zeros(n, dtype=int),
                        before, after, seconds)


def fgsm(model, x, label, eps):
    res = fgsm_batch(model, x, [label], eps)
    return res.x_adv[0], res.perturbation(0)


# --- SSA ------------------------------------------------------------------------

def _ssa_step(logits, jac, k0, cfg):
    """Linearized step toward the closest class boundary for each row.

    Returns (steps, degenerate mask). ``k0`` holds 0-based original classes.
    """
    rows = np.arange(len(k0))
    f = logits.astype(float) - logits[rows, k0][:, None]
    w = jac.astype(float) - jac[rows, k0][:, None, :]
    norms = np.linalg.norm(w, axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs(f) / norms
    ratio[norms < cfg.grad_floor] = np.inf
    ratio[rows, k0] = np.inf
    degenerate = ~np.isfinite(ratio).any(axis=1)
    best = np.argmin(ratio, axis=1)
    fb = np.abs(f[rows, best])
    wb = w[rows, best]
    nb = norms[rows, best]
    scale = np.where(degenerate, 0.0, fb / np.where(degenerate, 1.0, nb) ** 2)
    return scale[:, None] * wb, degenerate


def ssa_batch(model, X, cfg=None):
    """Run the signal-specific attack on each row of ``X``.

    Rows are attacked independently. Each iteration linearizes every logit
    around the current point, picks the nearest linearized boundary of the
    original class and steps onto it; the accumulated step, scaled by
    ``1 + overshoot``, is what gets added to the signal.
    """
    cfg = cfg or SsaConfig()
    X = _as_rows(X)
    n = len(X)
    t0 = time.perf_counter()
    before = model.predict(X)
    k0 = before - 1
    r_tot = np.zeros_like(X)
    iters = np.zeros(n, dtype=int)
    status = np.full(n, -1)
    active = np.arange(n)
    scale = 1.0 + cfg.overshoot
    while active.size:
        x_cur = X[active] + scale * r_tot[active]
        flipped = model.predict(x_cur) != before[active]
        status[active[flipped]] = SUCCESS
        active = active[~flipped]
        if not active.size:
            break
        capped = iters[active] >= cfg.max_iter
        status[active[capped]] = NOT_CONVERGED
        active = active[~capped]
        for s in range(0, active.size, cfg.chunk):
            idx = active[s:s + cfg.chunk]
            logits, jac = model.logit_jacobian(X[idx] + scale * r_tot[idx])
            step, degenerate = _ssa_step(logits, jac, k0[idx], cfg)
            r_tot[idx] += step
            iters[idx] += 1
            status[idx[degenerate]] = DEGENERATE
        active = active[status[active] == -1]
    r = scale * r_tot
    r[status != SUCCESS] = np.where(status[status != SUCCESS, None] == DEGENERATE, 0.0,
                                    r[status != SUCCESS])
    x_adv = X + r
    seconds = time.perf_counter() - t0
    after = model.predict(x_adv)
    return AttackResult("ssa", x_adv, r, iters, status, before, after, seconds)


def ssa_perturb(model, x, cfg=None):
    """Signal-specific adversarial signal for one signal.

    Raises NotConverged when the label does not flip within ``cfg.max_iter``
    iterations and DegenerateGradient when every logit-difference gradient
    vanishes.
    """
    cfg = cfg or SsaConfig()
    res = ssa_batch(model, x, cfg)
    if res.status[0] == DEGENERATE:
        raise DegenerateGradient("all logit-difference gradients are below grad_floor")
    if res.status[0] == NOT_CONVERGED:
        raise NotConverged(f"label did not change within {cfg.max_iter} iterations")
    return res.x_adv[0], res.perturbation(0)


# --- universal perturbations --------------------------------------------------------

def project_l2_ball(v, xi):
    """Closest point to ``v`` inside the l2 ball of radius ``xi`` centred at 0."""
    if xi <= 0:
        raise ValueError("xi must be positive")
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if norm <= xi:
        return v
    return v * (xi / norm)


def fooling_rate(model, X, v, pred_clean=None):
    """Fraction of rows whose predicted label changes when ``v`` is added."""
    X = _as_rows(X)
    if len(X) == 0:
        raise EmptySet("fooling rate of an empty set")
    if pred_clean is None:
        pred_clean = model.predict(X)
    return float(np.mean(model.predict(X + v) != pred_clean))


def saa_universal(model, X, xi=1.0, delta=0.26, max_epochs=5, cfg=None, seed=0, log=None):
    """Build one perturbation ``v`` with ``||v||_2 <= xi`` that fools most of ``X``.

    Passes over ``X`` (reshuffled each pass) until the fooling rate on ``X``
    exceeds ``1 - delta`` or ``max_epochs`` passes are done. For each signal
    still classified as before, the signal-specific attack is run from
    ``x + v`` and its perturbation is added to ``v`` before projecting back onto
    the ball. Signals on which that inner attack fails are skipped for the pass.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if xi <= 0:
        raise ValueError("xi must be positive")
    cfg = cfg or SsaConfig()
    X = _as_rows(X)
    if len(X) == 0:
        raise EmptySet("cannot build a universal perturbation from an empty set")
    pred0 = model.predict(X)
    v = np.zeros(X.shape[1])
    history = []
    epochs = 0
    rate = 0.0
    while epochs < max_epochs:
        rate = fooling_rate(model, X, v, pred0)
        if rate > 1 - delta:
            break
        order = substream(seed, "attack", epochs).permutation(len(X))
        updates = 0
        for i in order:
            x = X[i] + v
            if model.predict(x)[0] != pred0[i]:
                continue
            res = ssa_batch(model, x, cfg)
            if res.status[0] != SUCCESS:
                continue
            v = project_l2_ball(v + res.r[0], xi)
            updates += 1
        epochs += 1
        history.append({"epoch": epochs, "fool_rate_before": rate, "updates": updates})
        if log:
            log(history[-1])
    rate = fooling_rate(model, X, v, pred0)
    return UniversalPerturbation(v, float(xi), float(delta), rate, epochs, history)


def apply_universal(model, X, v):
    """Add ``v`` to every row; returns an AttackResult with timing of the addition only."""
    X = _as_rows(X)
    t0 = time.perf_counter()
    x_adv = X + v
    seconds = time.perf_counter() - t0
    n = len(X)
    r = np.broadcast_to(np.asarray(v, dtype=float), X.shape).copy()
    return AttackResult("saa", x_adv, r, np.zeros(n, dtype=int), np.zeros(n, dtype=int),
                        model.predict(X), model.predict(x_adv), seconds)
