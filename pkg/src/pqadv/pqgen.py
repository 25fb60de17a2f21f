"""Synthetic power-quality disturbance signals and labeled datasets.

Seventeen classes are produced from standard parametric models of a 50 Hz
per-unit voltage waveform sampled at 3200 Hz over ten cycles (640 samples).
"""

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import IoFailure, ParamOutOfRange, UnknownClass, ZeroSignal
from .rng import substream

N_CLASSES = 17

CLASS_NAMES = {
    1: "Normal",
    2: "Sag",
    3: "Swell",
    4: "Interruption",
    5: "Transient/Impulse/Spike",
    6: "Oscillatory transient",
    7: "Harmonics",
    8: "Harmonics with Sag",
    9: "Harmonics with Swell",
    10: "Flicker",
    11: "Flicker with Sag",
    12: "Flicker with Swell",
    13: "Sag with Oscillatory transient",
    14: "Swell with Oscillatory transient",
    15: "Sag with Harmonics",
    16: "Swell with Harmonics",
    17: "Notch",
}


@dataclass(frozen=True)
class TimeGrid:
    sampling_rate: float = 3200.0
    fundamental: float = 50.0
    cycles: int = 10

    @property
    def n_samples(self) -> int:
        return int(round(self.sampling_rate * self.cycles / self.fundamental))

    @property
    def period(self) -> float:
        return 1.0 / self.fundamental

    @property
    def duration(self) -> float:
        return self.cycles / self.fundamental

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.n_samples) / self.sampling_rate


@dataclass(frozen=True)
class DisturbanceParams:
    """Generator parameters; fields a class does not use stay ``None``.

    Times are in seconds and measured from the first sample.
    """

    class_id: int
    amplitude: float = 1.0
    phase: float = 0.0
    # sag / swell / interruption depth, or impulse height
    alpha: Optional[float] = None
    t1: Optional[float] = None
    t2: Optional[float] = None
    a3: Optional[float] = None
    a5: Optional[float] = None
    a7: Optional[float] = None
    flicker_mag: Optional[float] = None
    flicker_freq: Optional[float] = None
    trans_mag: Optional[float] = None
    trans_tau: Optional[float] = None
    trans_freq: Optional[float] = None
    trans_t1: Optional[float] = None
    trans_t2: Optional[float] = None
    notch_depth: Optional[float] = None
    notch_width: Optional[float] = None
    notch_offset: Optional[float] = None

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class SignalVector:
    values: np.ndarray
    label: int
    params: Optional[DisturbanceParams] = None
    snr_db: Optional[float] = None


@dataclass
class Dataset:
    train: list
    test: list
    seed: int
    per_class: int = 0
    snr_db: Optional[float] = None
    grid: TimeGrid = field(default_factory=TimeGrid)

    @property
    def class_counts(self):
        counts = {c: 0 for c in range(1, N_CLASSES + 1)}
        for s in self.train + self.test:
            counts[s.label] += 1
        return counts

    def arrays(self, split="train"):
        """Stack one split into ``(X, y)`` with X of shape (n, n_samples)."""
        sigs = getattr(self, split)
        X = np.stack([s.values for s in sigs]) if sigs else np.zeros((0, self.grid.n_samples))
        y = np.array([s.label for s in sigs], dtype=np.int64)
        return X, y


# Parameter ranges, keyed by field. Window lengths are checked separately.
SAG = (0.1, 0.9)
SWELL = (0.1, 0.8)
INTERRUPTION = (0.9, 1.0)
IMPULSE = (1.0, 3.0)
HARM = (0.05, 0.15)
FLICKER_MAG = (0.1, 0.2)
FLICKER_FREQ = (5.0, 20.0)
TRANS_MAG = (0.1, 0.8)
TRANS_TAU = (8e-3, 40e-3)
TRANS_FREQ = (300.0, 900.0)
NOTCH_DEPTH = (0.1, 0.4)
NOTCH_WIDTH = (0.3e-3, 1e-3)

EVENT_CYCLES = (1.0, 9.0)
IMPULSE_WIDTH = (0.5e-3, 3e-3)
TRANSIENT_CYCLES = (0.5, 3.0)

# class -> (event depth range or None, harmonics, flicker, transient, notch)
_CLASS_PARTS = {
    1: (None, False, False, False, False),
    2: (SAG, False, False, False, False),
    3: (SWELL, False, False, False, False),
    4: (INTERRUPTION, False, False, False, False),
    5: (IMPULSE, False, False, False, False),
    6: (None, False, False, True, False),
    7: (None, True, False, False, False),
    8: (SAG, True, False, False, False),
    9: (SWELL, True, False, False, False),
    10: (None, False, True, False, False),
    11: (SAG, False, True, False, False),
    12: (SWELL, False, True, False, False),
    13: (SAG, False, False, True, False),
    14: (SWELL, False, False, True, False),
    15: (SAG, True, False, False, False),
    16: (SWELL, True, False, False, False),
    17: (None, False, False, False, True),
}

_SWELL_CLASSES = {3, 9, 12, 14, 16}
# harmonic distortion confined to the event window (8/9 carry it throughout)
_GATED_HARMONICS = {15, 16}


def _check_class(class_id):
    if not isinstance(class_id, (int, np.integer)) or not 1 <= class_id <= N_CLASSES:
        raise UnknownClass(f"class_id must be in 1..{N_CLASSES}, got {class_id!r}")
    return int(class_id)


def _in_range(name, value, bounds, tol=1e-12):
    if value is None:
        raise ParamOutOfRange(name, value, bounds)
    lo, hi = bounds
    if not (lo - tol <= value <= hi + tol) or not math.isfinite(value):
        raise ParamOutOfRange(name, value, bounds)


def _check_window(p, lo, hi, duration, start="t1", end="t2"):
    a, b = getattr(p, start), getattr(p, end)
    if a is None or b is None:
        raise ParamOutOfRange(start if a is None else end, None)
    if not (0.0 <= a < b <= duration + 1e-12):
        raise ParamOutOfRange(f"({start},{end})", (a, b), (0.0, duration))
    _in_range(f"{end}-{start}", b - a, (lo, hi))


def validate_params(class_id, params, grid=TimeGrid()):
    """Raise ParamOutOfRange unless ``params`` lies in the ranges of ``class_id``."""
    class_id = _check_class(class_id)
    depth, harm, flick, trans, notch = _CLASS_PARTS[class_id]
    T = grid.period
    if depth is not None:
        _in_range("alpha", params.alpha, depth)
        if class_id == 5:
            _check_window(params, *IMPULSE_WIDTH, grid.duration)
        else:
            _check_window(params, EVENT_CYCLES[0] * T, EVENT_CYCLES[1] * T, grid.duration)
    if harm:
        for name in ("a3", "a5", "a7"):
            _in_range(name, getattr(params, name), HARM)
    if flick:
        _in_range("flicker_mag", params.flicker_mag, FLICKER_MAG)
        _in_range("flicker_freq", params.flicker_freq, FLICKER_FREQ)
    if trans:
        _in_range("trans_mag", params.trans_mag, TRANS_MAG)
        _in_range("trans_tau", params.trans_tau, TRANS_TAU)
        _in_range("trans_freq", params.trans_freq, TRANS_FREQ)
        _check_window(params, TRANSIENT_CYCLES[0] * T, TRANSIENT_CYCLES[1] * T,
                      grid.duration, "trans_t1", "trans_t2")
    if notch:
        _in_range("notch_depth", params.notch_depth, NOTCH_DEPTH)
        _in_range("notch_width", params.notch_width, NOTCH_WIDTH)
        _in_range("notch_offset", params.notch_offset, (0.0, T - params.notch_width))


def _gate(t, a, b):
    # u(t - a) - u(t - b) with u(0) = 1
    return ((t >= a) & (t < b)).astype(float)


def waveform(params, t, omega=2 * np.pi * 50.0):
    """Evaluate the noiseless waveform of ``params`` at times ``t``.

    No range checks are made, so secondary disturbances may be switched off by
    setting their magnitude to zero.
    """
    class_id = _check_class(params.class_id)
    depth, harm, flick, trans, notch = _CLASS_PARTS[class_id]
    t = np.asarray(t, dtype=float)
    theta = omega * t + params.phase
    base = np.sin(theta)
    distortion = 0.0
    if harm:
        distortion = (params.a3 * np.sin(3 * theta) + params.a5 * np.sin(5 * theta)
                      + params.a7 * np.sin(7 * theta))
        if class_id not in _GATED_HARMONICS:
            base = base + distortion

    if depth is not None:
        window = _gate(t, params.t1, params.t2)
        if class_id == 5:
            base = base + params.alpha * window
        elif class_id in _SWELL_CLASSES:
            base = (1.0 + params.alpha * window) * base
        else:
            base = (1.0 - params.alpha * window) * base
        if class_id in _GATED_HARMONICS:
            # distortion present only during the event, not scaled by its depth
            base = base + distortion * window

    if flick:
        base = (1.0 + params.flicker_mag * np.sin(2 * np.pi * params.flicker_freq * t)) * base

    if trans:
        dt = t - params.trans_t1
        ring = (params.trans_mag * np.exp(-np.clip(dt, 0.0, None) / params.trans_tau)
                * np.sin(2 * np.pi * params.trans_freq * dt))
        base = base + ring * _gate(t, params.trans_t1, params.trans_t2)

    if notch:
        period = 2 * np.pi / omega
        in_notch = np.mod(t - params.notch_offset, period) < params.notch_width
        base = base - params.notch_depth * np.sign(np.sin(theta)) * in_notch

    return params.amplitude * base


def synthesize_signal(class_id, params, grid=TimeGrid()):
    """Noiseless signal of ``class_id`` on ``grid``; raises on invalid params."""
    class_id = _check_class(class_id)
    if params.class_id != class_id:
        params = replace(params, class_id=class_id)
    validate_params(class_id, params, grid)
    values = waveform(params, grid.t, 2 * np.pi * grid.fundamental)
    return SignalVector(values=values, label=class_id, params=params, snr_db=None)


def _window(rng, lo, hi, duration):
    length = rng.uniform(lo, hi)
    start = rng.uniform(0.0, duration - length)
    return start, start + length


def sample_params(class_id, rng, grid=TimeGrid()):
    """Draw uniformly distributed parameters for ``class_id``."""
    class_id = _check_class(class_id)
    depth, harm, flick, trans, notch = _CLASS_PARTS[class_id]
    T = grid.period
    kw = {"phase": rng.uniform(0.0, 2 * np.pi)}
    if depth is not None:
        kw["alpha"] = rng.uniform(*depth)
        if class_id == 5:
            kw["t1"], kw["t2"] = _window(rng, *IMPULSE_WIDTH, grid.duration)
        else:
            kw["t1"], kw["t2"] = _window(rng, EVENT_CYCLES[0] * T, EVENT_CYCLES[1] * T,
                                         grid.duration)
    if harm:
        kw["a3"], kw["a5"], kw["a7"] = rng.uniform(*HARM, size=3)
    if flick:
        kw["flicker_mag"] = rng.uniform(*FLICKER_MAG)
        kw["flicker_freq"] = rng.uniform(*FLICKER_FREQ)
    if trans:
        kw["trans_mag"] = rng.uniform(*TRANS_MAG)
        kw["trans_tau"] = rng.uniform(*TRANS_TAU)
        kw["trans_freq"] = rng.uniform(*TRANS_FREQ)
        length = rng.uniform(TRANSIENT_CYCLES[0] * T, TRANSIENT_CYCLES[1] * T)
        if depth is not None:
            # ringing starts at the sag/swell onset
            start = min(kw["t1"], grid.duration - length)
        else:
            start = rng.uniform(0.0, grid.duration - length)
        kw["trans_t1"], kw["trans_t2"] = start, start + length
    if notch:
        kw["notch_depth"] = rng.uniform(*NOTCH_DEPTH)
        kw["notch_width"] = rng.uniform(*NOTCH_WIDTH)
        kw["notch_offset"] = rng.uniform(0.0, T - kw["notch_width"])
    return DisturbanceParams(class_id=class_id, **{k: float(v) for k, v in kw.items()})


def add_noise(signal, snr_db, rng):
    """Add white Gaussian noise so that signal power / noise power = ``snr_db``."""
    if snr_db is None or snr_db == math.inf:
        return signal
    if not math.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite or +inf, got {snr_db}")
    power = float(np.mean(np.square(signal.values)))
    if power == 0.0:
        raise ZeroSignal("SNR is undefined for an all-zero signal")
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    noisy = signal.values + rng.normal(0.0, sigma, size=signal.values.shape)
    return replace(signal, values=noisy, snr_db=float(snr_db))


def generate_signal(seed, index, class_id, snr_db, grid=TimeGrid()):
    """The ``index``-th signal of a seeded dataset; independent of generation order."""
    rng = substream(seed, "gen", index)
    params = sample_params(class_id, rng, grid)
    sig = synthesize_signal(class_id, params, grid)
    return add_noise(sig, snr_db, rng)


def build_dataset(per_class, snr_db=30.0, seed=0, grid=TimeGrid()):
    """Generate ``17 * per_class`` signals and split them 3/4 train, 1/4 test.

    The test quota is spread evenly over classes (any remainder goes to randomly
    chosen classes) so every class appears in both splits; both splits are then
    shuffled globally.
    """
    if per_class < 4:
        raise ValueError("per_class must be at least 4")
    signals = []
    for c in range(1, N_CLASSES + 1):
        for j in range(per_class):
            signals.append(generate_signal(seed, (c - 1) * per_class + j, c, snr_db, grid))

    rng = substream(seed, "shuffle")
    n_test = len(signals) // 4
    quota = np.full(N_CLASSES, per_class // 4)
    extra = n_test - quota.sum()
    if extra > 0:
        quota[rng.choice(N_CLASSES, size=extra, replace=False)] += 1
    train_idx, test_idx = [], []
    for c in range(N_CLASSES):
        idx = c * per_class + rng.permutation(per_class)
        test_idx.extend(idx[: quota[c]])
        train_idx.extend(idx[quota[c]:])
    train_idx = rng.permutation(np.array(train_idx))
    test_idx = rng.permutation(np.array(test_idx))
    return Dataset(
        train=[signals[i] for i in train_idx],
        test=[signals[i] for i in test_idx],
        seed=seed,
        per_class=per_class,
        snr_db=snr_db,
        grid=grid,
    )


# --- persistence -----------------------------------------------------------

def _header(n):
    return "label," + ",".join(f"s{i}" for i in range(n))


def write_signals_csv(path, X, labels, extra_columns=None):
    """Write rows ``label,s0..s{n-1}[,extra...]`` with 9 significant digits."""
    X = np.asarray(X, dtype=float)
    header = _header(X.shape[1])
    extra_columns = extra_columns or {}
    if extra_columns:
        header += "," + ",".join(extra_columns)
    lines = [header]
    for i in range(X.shape[0]):
        row = [str(int(labels[i]))]
        row.extend("%.9g" % v for v in X[i])
        for col in extra_columns.values():
            v = col[i]
            row.append(str(int(v)) if isinstance(v, (int, np.integer)) else "%.9g" % v)
        lines.append(",".join(row))
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_signals_csv(path, n_samples=None):
    """Inverse of ``write_signals_csv``; returns (X, labels, extra columns)."""
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    n = n_samples or sum(1 for h in header if h.startswith("s") and h[1:].isdigit())
    labels = data[:, 0].astype(np.int64)
    X = data[:, 1:1 + n]
    extra = {name: data[:, 1 + n + i] for i, name in enumerate(header[1 + n:])}
    return X, labels, extra


def save_dataset(ds, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        X, y = ds.arrays(split)
        write_signals_csv(out / f"{split}.csv", X, y)
    manifest = {
        "seed": ds.seed,
        "per_class": ds.per_class,
        "snr_db": ds.snr_db if ds.snr_db is not None and math.isfinite(ds.snr_db) else None,
        "sampling_rate": ds.grid.sampling_rate,
        "fundamental": ds.grid.fundamental,
        "cycles": ds.grid.cycles,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(data_dir):
    d = Path(data_dir)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read dataset manifest in {d}: {exc}") from exc
    grid = TimeGrid(manifest["sampling_rate"], manifest["fundamental"], manifest["cycles"])
    snr = manifest.get("snr_db")
    splits = {}
    for split in ("train", "test"):
        X, y, _ = read_signals_csv(d / f"{split}.csv", grid.n_samples)
        splits[split] = [SignalVector(values=X[i], label=int(y[i]), snr_db=snr)
                         for i in range(len(y))]
    return Dataset(splits["train"], splits["test"], seed=manifest["seed"],
                   per_class=manifest["per_class"], snr_db=snr, grid=grid)

