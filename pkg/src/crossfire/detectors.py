"""ANN, CNN and LSTM attack detectors and the consecutive-verdict alarm.

Features per sample are the timestamp followed by ``(flow count, Kbit)``
for each of the ``L`` monitored links. The ANN scores single samples and
sees the timestamp; the CNN (10 rows) and LSTM (32 steps) score sliding
windows and let row order carry time instead.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .fileio import atomic_write_text
from .nn import ShapeError
from .simulation import TrafficSample, samples_to_arrays

ARCHS = ("ann", "cnn", "lstm")
MODEL_MAGIC = "crossfire-model"
MODEL_VERSION = "v1"

DEFAULT_HYPER = {
    "ann": {"hidden1": 25, "hidden2": 25, "pad": 1},
    "cnn": {"window": 10, "k1": 8, "kt": 3, "k2": 8, "kr": 3, "dense": 16},
    "lstm": {"window": 32, "units": 32},
}


class NetworkState(str, Enum):
    NORMAL = "NORMAL"
    UNDER_ATTACK = "UNDER_ATTACK"


class ModelFormatError(ValueError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


@dataclass
class Normalization:
    """Per-feature min/max; column 0 is the timestamp."""

    mins: np.ndarray
    maxs: np.ndarray

    @classmethod
    def fit(cls, samples: Sequence[TrafficSample]) -> Normalization:
        t, x, _ = samples_to_arrays(samples)
        full = np.column_stack([t, x])
        return cls(full.min(axis=0), full.max(axis=0))

    def scale(self, values: np.ndarray) -> np.ndarray:
        """Min-max scale ``values[..., 1+2L]`` into [0, 1], clamping outliers.

        A constant training column (min == max) maps to 0.
        """
        span = self.maxs - self.mins
        safe = np.where(span > 0, span, 1.0)
        out = (values - self.mins) / safe
        out = np.where(span > 0, out, 0.0)
        return np.clip(out, 0.0, 1.0)


@dataclass
class DetectorModel:
    arch: str
    n_links: int
    hyper: dict[str, int]
    network: nn.Sequential
    normalization: Normalization | None = None
    threshold: float = 0.5

    @property
    def window(self) -> int:
        return 1 if self.arch == "ann" else int(self.hyper["window"])

    @property
    def input_shape(self) -> tuple[int, ...]:
        """Shape of one (unbatched) model input."""
        f = 2 * self.n_links
        if self.arch == "ann":
            return (1 + f + self.hyper["pad"],)
        if self.arch == "cnn":
            return (1, self.window, f)
        return (self.window, f)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"{self.arch} expects inputs of shape {self.input_shape}, got {x.shape[1:]}")
        return self.network.predict(x)


def build_detector(arch: str, n_links: int, seed: int = 0, **hyper: int) -> DetectorModel:
    """Freshly initialized detector; same seed gives the same parameters."""
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    if n_links < 1:
        raise ValueError("n_links must be >= 1")
    unknown = set(hyper) - set(DEFAULT_HYPER[arch])
    if unknown:
        raise ValueError(f"unknown {arch} hyperparameters: {sorted(unknown)}")
    h = {**DEFAULT_HYPER[arch], **{k: int(v) for k, v in hyper.items()}}
    rng = np.random.default_rng(seed)
    f = 2 * n_links

    if arch == "ann":
        width = 1 + f + h["pad"]
        layers = [
            nn.Dense(width, h["hidden1"], rng), nn.ReLU(),
            nn.Dense(h["hidden1"], h["hidden2"], rng), nn.ReLU(),
            nn.Dense(h["hidden2"], 1, rng), nn.Sigmoid(),
        ]
    elif arch == "cnn":
        if h["kt"] > f or h["kr"] > h["window"]:
            raise ValueError("CNN kernels larger than the input window")
        # temporal filters see one row at a time; spatial filters then span
        # the full width of the temporal maps over kr rows
        maps_w = f - h["kt"] + 1
        rows = h["window"] - h["kr"] + 1
        layers = [
            nn.Conv2D(1, h["k1"], 1, h["kt"], rng), nn.ReLU(),
            nn.Conv2D(h["k1"], h["k2"], h["kr"], maps_w, rng), nn.ReLU(),
            nn.Flatten(),
            nn.Dense(h["k2"] * rows, h["dense"], rng), nn.ReLU(),
            nn.Dense(h["dense"], 1, rng), nn.Sigmoid(),
        ]
    else:
        u = h["units"]
        layers = [
            nn.LSTM(f, u, return_sequences=True, rng=rng),
            nn.LSTM(u, u, return_sequences=False, rng=rng),
            nn.Dense(u, 1, rng), nn.Sigmoid(),
        ]
    return DetectorModel(arch, n_links, h, nn.Sequential(layers))


def window_labels(labels: np.ndarray, window: int) -> np.ndarray:
    """Attack iff at least half of a window's samples are attack samples."""
    labels = np.asarray(labels, dtype=int)
    if window == 1:
        return labels.copy()
    if len(labels) < window:
        return np.zeros(0, dtype=int)
    sums = np.convolve(labels, np.ones(window, dtype=int), mode="valid")
    return (2 * sums >= window).astype(int)


def featurize(
    samples: Sequence[TrafficSample], arch: str, normalization: Normalization,
    *, window: int | None = None, pad: int = 1,
) -> np.ndarray:
    """Scaled model inputs, one per sliding window (stride 1).

    ANN rows are ``[timestamp, link features..., zeros(pad)]``. CNN inputs
    are ``[N, 1, window, 2L]`` and LSTM inputs ``[N, window, 2L]``.
    """
    window = window or (1 if arch == "ann" else DEFAULT_HYPER[arch]["window"])
    if len(samples) < window:
        raise ValueError(f"{arch} needs at least {window} samples, got {len(samples)}")
    t, x, _ = samples_to_arrays(samples)
    scaled = normalization.scale(np.column_stack([t, x]))
    if arch == "ann":
        return np.hstack([scaled, np.zeros((len(scaled), pad))])
    feats = scaled[:, 1:]
    wins = np.lib.stride_tricks.sliding_window_view(feats, window, axis=0)  # N' F W
    wins = np.ascontiguousarray(wins.transpose(0, 2, 1))
    return wins[:, None] if arch == "cnn" else wins


def model_inputs(model: DetectorModel, samples: Sequence[TrafficSample]) -> np.ndarray:
    if model.normalization is None:
        raise ValueError("model has no normalization statistics; train or load it first")
    width = 2 * model.n_links
    if samples and len(samples[0].flows) * 2 != width:
        raise ShapeError(
            f"model monitors {model.n_links} links but samples carry {len(samples[0].flows)}"
        )
    return featurize(samples, model.arch, model.normalization,
                     window=model.window, pad=model.hyper.get("pad", 0))


def training_set(model: DetectorModel, samples: Sequence[TrafficSample]):
    """``(inputs, window labels)`` for the given stream."""
    _, _, y = samples_to_arrays(samples)
    return model_inputs(model, samples), window_labels(y, model.window)


def fit_detector(model: DetectorModel, samples: Sequence[TrafficSample],
                 config: nn.TrainConfig | None = None, *, indices: np.ndarray | None = None) -> nn.TrainResult:
    """Fit normalization on ``samples`` and train on (a subset of) its windows."""
    model.normalization = Normalization.fit(samples)
    x, y = training_set(model, samples)
    if indices is not None:
        x, y = x[indices], y[indices]
    return nn.train(model.network, x, y, config)


@dataclass(frozen=True)
class DetectorOutput:
    probability: float
    verdict: bool  # True = attack
    window_end_timestamp: float | None = None


def classify(model: DetectorModel, x: np.ndarray, timestamp: float | None = None) -> DetectorOutput:
    """Score one unbatched input."""
    x = np.asarray(x, dtype=float)
    p = float(model.predict_proba(x[None])[0])
    return DetectorOutput(p, p >= model.threshold, timestamp)


class AlphaBuffer:
    """Alarm after ``alpha`` consecutive attack verdicts.

    A normal verdict empties the buffer; once full, further attack verdicts
    overwrite the oldest entry and keep it full.
    """

    def __init__(self, alpha: int):
        if alpha < 1:
            raise ValueError("alpha must be >= 1")
        self.alpha = alpha
        self.contents: deque[bool] = deque(maxlen=alpha)

    def __len__(self) -> int:
        return len(self.contents)

    @property
    def state(self) -> NetworkState:
        return NetworkState.UNDER_ATTACK if len(self.contents) == self.alpha else NetworkState.NORMAL

    def push(self, verdict: bool) -> NetworkState:
        if verdict:
            self.contents.append(True)
        else:
            self.contents.clear()
        return self.state


def alpha_push(buffer: AlphaBuffer, verdict: bool) -> tuple[AlphaBuffer, NetworkState]:
    return buffer, buffer.push(verdict)


def alpha_states(verdicts: Sequence[bool], alpha: int) -> list[NetworkState]:
    buf = AlphaBuffer(alpha)
    return [buf.push(bool(v)) for v in verdicts]


@dataclass(frozen=True)
class DetectionRecord:
    timestamp: float
    probability: float
    verdict: bool
    state: NetworkState


@dataclass
class StreamScores:
    """Per-window probabilities for a stream, reusable across alpha values."""

    timestamps: np.ndarray  # window-end timestamps
    probabilities: np.ndarray
    labels: np.ndarray  # window ground truth
    threshold: float = 0.5

    @property
    def verdicts(self) -> np.ndarray:
        return self.probabilities >= self.threshold

    def records(self, alpha: int) -> list[DetectionRecord]:
        states = alpha_states(self.verdicts, alpha)
        return [DetectionRecord(float(t), float(p), bool(v), s)
                for t, p, v, s in zip(self.timestamps, self.probabilities, self.verdicts, states)]


def score_stream(model: DetectorModel, samples: Sequence[TrafficSample]) -> StreamScores:
    t, _, y = samples_to_arrays(samples)
    w = model.window
    if len(samples) < w:
        warnings.warn(f"stream of {len(samples)} samples is shorter than the {w}-sample window")
        return StreamScores(np.zeros(0), np.zeros(0), np.zeros(0, dtype=int), model.threshold)
    probs = model.predict_proba(model_inputs(model, samples))
    return StreamScores(t[w - 1:], probs, window_labels(y, w), model.threshold)


def detect_stream(model: DetectorModel, samples: Sequence[TrafficSample], alpha: int) -> list[DetectionRecord]:
    """Slide the model's window one sample at a time and run the alarm rule.

    Returns one record per window, stamped with the window's last sample.
    An empty list (plus a warning) means the stream is shorter than a window.
    """
    return score_stream(model, samples).records(alpha)


# -- model files ------------------------------------------------------------

def dumps_model(model: DetectorModel) -> str:
    hyper = {"n_links": model.n_links, **model.hyper, "threshold": model.threshold}
    lines = [
        f"{MODEL_MAGIC} {MODEL_VERSION} {model.arch}",
        " ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in hyper.items()),
    ]
    norm = model.normalization
    if norm is None:
        lines.append("norm none")
    else:
        lines.append("norm " + " ".join(f"{a!r},{b!r}" for a, b in zip(norm.mins.tolist(), norm.maxs.tolist())))
    for name, value in model.network.named_params():
        shape = "x".join(str(d) for d in value.shape)
        lines.append(f"{name} {shape} " + " ".join(repr(v) for v in value.reshape(-1).tolist()))
    return "\n".join(lines) + "\n"


def save_model(model: DetectorModel, path: str | Path) -> None:
    atomic_write_text(path, dumps_model(model))


def loads_model(text: str, source: str = "<model>") -> DetectorModel:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    def fail(lineno: int, msg: str) -> ModelFormatError:
        return ModelFormatError(f"{source}:{lineno}: {msg}")

    if not lines:
        raise fail(1, "empty model file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != MODEL_MAGIC:
        raise fail(1, f"not a {MODEL_MAGIC} file")
    if head[1] != MODEL_VERSION:
        raise UnsupportedVersionError(f"{source}:1: unsupported model version {head[1]!r}")
    arch = head[2]
    if arch not in ARCHS:
        raise fail(1, f"unknown architecture {arch!r}")
    if len(lines) < 3:
        raise fail(len(lines) + 1, "truncated header")

    try:
        hyper = dict(tok.split("=", 1) for tok in lines[1].split())
        n_links = int(hyper.pop("n_links"))
        threshold = float(hyper.pop("threshold", 0.5))
        model = build_detector(arch, n_links, **{k: int(v) for k, v in hyper.items()})
    except (ValueError, KeyError) as exc:
        raise fail(2, f"bad hyperparameters: {exc}") from None
    model.threshold = threshold

    norm_tok = lines[2].split()
    if not norm_tok or norm_tok[0] != "norm":
        raise fail(3, "expected normalization line")
    if norm_tok[1:] != ["none"]:
        try:
            pairs = [tuple(float(v) for v in tok.split(",")) for tok in norm_tok[1:]]
        except ValueError as exc:
            raise fail(3, str(exc)) from None
        if len(pairs) != 1 + 2 * n_links or any(len(p) != 2 for p in pairs):
            raise fail(3, f"expected {1 + 2 * n_links} min,max pairs")
        arr = np.array(pairs)
        model.normalization = Normalization(arr[:, 0].copy(), arr[:, 1].copy())

    expected = list(model.network.named_params())
    state = {}
    for offset, (name, ref) in enumerate(expected):
        lineno = 4 + offset
        if lineno > len(lines):
            raise fail(lineno, f"missing parameter {name} (file truncated)")
        tok = lines[lineno - 1].split()
        if len(tok) < 2 or tok[0] != name:
            raise fail(lineno, f"expected parameter {name}")
        shape = tuple(int(d) for d in tok[1].split("x"))
        if shape != ref.shape:
            raise fail(lineno, f"{name} has shape {shape}, architecture needs {ref.shape}")
        if len(tok) - 2 != ref.size:
            raise fail(lineno, f"{name} has {len(tok) - 2} values, expected {ref.size}")
        try:
            state[name] = np.array([float(v) for v in tok[2:]]).reshape(shape)
        except ValueError as exc:
            raise fail(lineno, str(exc)) from None
    if len(lines) > 3 + len(expected):
        raise fail(4 + len(expected), "unexpected trailing content")
    model.network.set_state(state)
    return model


def load_model(path: str | Path) -> DetectorModel:
    path = Path(path)
    return loads_model(path.read_text(encoding="utf-8"), str(path))
