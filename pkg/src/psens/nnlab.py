"""Pixel-level partial sensitivity of a small sigmoid MLP on 5x5 bar images.

The network (25 -> 8 -> 8 -> 1, sigmoid after every layer, bias on the
hidden layer only, binary cross-entropy loss) is built once as a symbolic
graph. Training evaluates a compiled per-sample gradient program over the
whole batch; partial sensitivities of the loss with respect to the input
pixels come from :mod:`psens.sens`.

Parameter layout (280 values, ``w0`` ... ``w279``)::

    w[0:200]    W1[i, j]  input i -> hidden1 j, index 8*i + j
    w[200:264]  W2[j, k]  hidden1 j -> hidden2 k, index 200 + 8*j + k
    w[264:272]  b2[k]
    w[272:280]  W3[k]     hidden2 k -> output
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from psens import tape
from psens.expr import ExprGraph, NodeId
from psens.privacy import DpSgdParams, clip_rows, gaussian_noise, substream
from psens.sens import check_variant, sensitivity_bundle

SIDE = 5
N_PIXELS = SIDE * SIDE
HIDDEN = 8
N_PARAMS = N_PIXELS * HIDDEN + HIDDEN * HIDDEN + HIDDEN + HIDDEN
CLASS_NAMES = ("vertical", "horizontal")
LAYER_SLICES = {
    "W1": slice(0, 200),
    "W2": slice(200, 264),
    "b2": slice(264, 272),
    "W3": slice(272, 280),
}
FAN_IN = {"W1": N_PIXELS, "W2": HIDDEN, "b2": HIDDEN, "W3": HIDDEN}


class NumericalError(RuntimeError):
    def __init__(self, message: str, sample_index: int | None = None):
        self.sample_index = sample_index
        super().__init__(message)


# -- data -------------------------------------------------------------------


@dataclass(frozen=True)
class DataSpec:
    n_train_per_class: int = 1000
    n_test_per_class: int = 100
    noise_std: float = 0.2
    seed: int = 7
    image_side: int = SIDE

    def __post_init__(self):
        if self.image_side != SIDE:
            raise ValueError("only 5x5 images are supported")
        if self.n_train_per_class < 0 or self.n_test_per_class < 0:
            raise ValueError("sample counts must be >= 0")
        if not self.noise_std >= 0:
            raise ValueError("noise_std must be >= 0")


@dataclass
class Split:
    name: str
    images: np.ndarray  # (n, 25), row-major pixels
    labels: np.ndarray  # (n,), 0 = vertical, 1 = horizontal

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    spec: DataSpec
    train: Split
    test: Split

    def split(self, name: str) -> Split:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def base_image(label: int) -> np.ndarray:
    """White (1.0) background with a black (0.0) bar through the centre."""
    img = np.ones((SIDE, SIDE))
    if label == 0:
        img[:, SIDE // 2] = 0.0
    else:
        img[SIDE // 2, :] = 0.0
    return img.ravel()


def gen_synthetic(spec: DataSpec) -> Dataset:
    """Noisy copies of the two bar images.

    Blocks are generated in the order class 0 train, class 1 train, class 0
    test, class 1 test from a single noise stream; pixels are not clipped.
    """
    blocks = [
        (0, spec.n_train_per_class),
        (1, spec.n_train_per_class),
        (0, spec.n_test_per_class),
        (1, spec.n_test_per_class),
    ]
    total = sum(n for _, n in blocks) * N_PIXELS
    noise = gaussian_noise(total, spec.noise_std, substream(spec.seed, "data"))
    images, labels = [], []
    offset = 0
    for label, n in blocks:
        chunk = noise[offset : offset + n * N_PIXELS].reshape(n, N_PIXELS)
        offset += n * N_PIXELS
        images.append(base_image(label) + chunk)
        labels.append(np.full(n, label, dtype=np.int64))
    train = Split("train", np.concatenate(images[:2]), np.concatenate(labels[:2]))
    test = Split("test", np.concatenate(images[2:]), np.concatenate(labels[2:]))
    return Dataset(spec, train, test)


# -- model ------------------------------------------------------------------


@dataclass
class ModelGraph:
    graph: ExprGraph
    loss_root: NodeId
    logit_root: NodeId
    param_vars: list[str]
    input_vars: list[str]
    label_var: str
    _programs: dict = field(default_factory=dict, repr=False)

    @property
    def all_inputs(self) -> list[str]:
        return self.param_vars + self.input_vars + [self.label_var]

    def columns(self, weights, images, labels) -> list:
        weights = check_weights(weights)
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.float64)
        cols = [weights[k : k + 1] for k in range(N_PARAMS)]
        cols += [images[:, p] for p in range(N_PIXELS)]
        cols.append(labels)
        return cols

    def program(self, name: str) -> tape.Program:
        """Compiled programs, built on first use and cached."""
        if name not in self._programs:
            g = self.graph
            if name == "train":
                from psens.diff import gradient

                grad = gradient(g, self.loss_root, self.param_vars)
                roots = [("loss", self.loss_root)] + [(f"d_{n}", d) for n, d in grad]
            elif name == "logit":
                roots = [("p", self.logit_root)]
            elif name.startswith("ps_"):
                variant = name[3:]
                check_variant(variant)
                bundle = sensitivity_bundle(g, self.loss_root, self.input_vars, variants=(variant,))
                roots = [("grad_norm", bundle.grad_norm)]
                roots += [(f"ps_{n}", d) for n, d in bundle.partial_sensitivity(variant).items()]
            else:
                raise KeyError(name)
            self._programs[name] = tape.compile(g, roots, self.all_inputs)
        return self._programs[name]


def check_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (N_PARAMS,):
        raise ValueError(f"expected {N_PARAMS} weights, got shape {w.shape}")
    return w


def build_mlp(g: ExprGraph | None = None) -> ModelGraph:
    g = g if g is not None else ExprGraph()
    w = [g.variable(f"w{k}") for k in range(N_PARAMS)]
    x = [g.variable(f"x{p}") for p in range(N_PIXELS)]
    y = g.variable("y")

    h1 = [g.sigmoid(g.sum([g.mul(w[HIDDEN * i + j], x[i]) for i in range(N_PIXELS)])) for j in range(HIDDEN)]
    h2 = []
    for k in range(HIDDEN):
        z = g.sum([g.mul(w[200 + HIDDEN * j + k], h1[j]) for j in range(HIDDEN)])
        h2.append(g.sigmoid(g.add(z, w[264 + k])))
    p = g.sigmoid(g.sum([g.mul(w[272 + k], h2[k]) for k in range(HIDDEN)]))

    one = g.constant(1.0)
    bce = g.add(g.mul(y, g.ln(p)), g.mul(g.sub(one, y), g.ln(g.sub(one, p))))
    loss = g.neg(bce)
    return ModelGraph(
        graph=g,
        loss_root=loss,
        logit_root=p,
        param_vars=[f"w{k}" for k in range(N_PARAMS)],
        input_vars=[f"x{p}" for p in range(N_PIXELS)],
        label_var="y",
    )


def init_weights(seed: int) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer, 'init' stream."""
    rng = substream(seed, "init")
    w = np.empty(N_PARAMS)
    for name, sl in LAYER_SLICES.items():
        bound = 1.0 / math.sqrt(FAN_IN[name])
        w[sl] = rng.uniform(-bound, bound, sl.stop - sl.start)
    return w


# -- training ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd"
    learning_rate: float = 0.1
    max_epochs: int = 5000
    convergence_tol: float = 1e-7
    init_seed: int = 42
    dp: DpSgdParams | None = None

    def __post_init__(self):
        if self.optimizer not in ("sgd", "dpsgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.optimizer == "dpsgd" and self.dp is None:
            raise ValueError("dpsgd requires DpSgdParams")


@dataclass
class TrainResult:
    weights: np.ndarray
    trajectory: np.ndarray  # (epochs + 1, 280); row 0 is the initialisation
    train_loss: list[float]  # loss at the weights of trajectory[t]
    test_accuracy: list[float]
    epochs: int
    converged: bool


def per_sample_gradients(model: ModelGraph, weights, images, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses ``(n,)`` and parameter gradients ``(n, 280)``."""
    out = model.program("train").run_columns(model.columns(weights, images, labels), n_rows=len(labels))
    losses, grads = out[0], out[1:].T
    bad = ~np.isfinite(losses) | ~np.isfinite(grads).all(axis=1)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise NumericalError(f"undefined loss or gradient at sample {idx}", idx)
    return losses, grads


def predict_proba(model: ModelGraph, weights, images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    cols = model.columns(weights, images, np.zeros(len(images)))
    return model.program("logit").run_columns(cols, n_rows=len(images))[0]


def accuracy(model: ModelGraph, weights, split: Split) -> float:
    if len(split) == 0:
        return math.nan
    pred = (predict_proba(model, weights, split.images) >= 0.5).astype(np.int64)
    return float(np.mean(pred == split.labels))


def _sum_rows(a: np.ndarray) -> np.ndarray:
    # one accumulator, rows added strictly in order (np.sum would pair them up)
    if len(a) == 0:
        return np.zeros(a.shape[1:])
    return np.add.accumulate(a, axis=0)[-1]


def train(model: ModelGraph, data: Dataset, cfg: TrainConfig) -> TrainResult:
    """Full-batch training with SGD or DP-SGD.

    Stops when the full-batch training loss changes by less than
    ``cfg.convergence_tol`` between consecutive epochs, or after
    ``cfg.max_epochs`` updates.
    """
    X, y = data.train.images, data.train.labels
    n = len(y)
    if n == 0:
        raise ValueError("empty training split")
    w = init_weights(cfg.init_seed)
    trajectory = [w.copy()]
    losses: list[float] = []
    accs: list[float] = []
    converged = False
    dp = cfg.dp
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        sample_loss, grads = per_sample_gradients(model, w, X, y)
        loss = float(_sum_rows(sample_loss) / n)
        losses.append(loss)
        accs.append(accuracy(model, w, data.test))
        if len(losses) > 1 and abs(losses[-1] - losses[-2]) < cfg.convergence_tol:
            converged = True
            epoch -= 1
            break
        if cfg.optimizer == "sgd":
            step = _sum_rows(grads) / n
        else:
            clipped = clip_rows(grads, dp.clip_bound)
            noise = gaussian_noise(N_PARAMS, dp.noise_std, substream(dp.seed, "dp-noise", epoch))
            step = (_sum_rows(clipped) + noise) / dp.batch_size
        w = w - cfg.learning_rate * step
        trajectory.append(w.copy())
    else:
        sample_loss, _ = per_sample_gradients(model, w, X, y)
        losses.append(float(_sum_rows(sample_loss) / n))
        accs.append(accuracy(model, w, data.test))
    return TrainResult(
        weights=w,
        trajectory=np.array(trajectory),
        train_loss=losses,
        test_accuracy=accs,
        epochs=len(trajectory) - 1,
        converged=converged,
    )


def train_sgd(model: ModelGraph, data: Dataset, cfg: TrainConfig) -> TrainResult:
    if cfg.optimizer != "sgd":
        raise ValueError("train_sgd needs optimizer='sgd'")
    return train(model, data, cfg)


def train_dpsgd(model: ModelGraph, data: Dataset, cfg: TrainConfig) -> TrainResult:
    if cfg.optimizer != "dpsgd":
        raise ValueError("train_dpsgd needs optimizer='dpsgd'")
    return train(model, data, cfg)


# -- partial sensitivity reports ---------------------------------------------


def batch_pixel_ps(model: ModelGraph, weights, images, labels, variant: str) -> tuple[np.ndarray, np.ndarray]:
    """Pixel partial sensitivities ``(n, 25)`` (NaN where undefined) and
    gradient norms ``(n,)``."""
    check_variant(variant)
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.float64))
    out = model.program(f"ps_{variant}").run_columns(model.columns(weights, images, labels), n_rows=len(labels))
    ps = out[1:].T.copy()
    ps[~np.isfinite(ps)] = np.nan
    return ps, out[0]


def pixel_partial_sensitivity(model: ModelGraph, weights, sample: Sequence[float], label: float, variant: str = "fractional") -> np.ndarray:
    """25-vector of partial sensitivities of the loss for one image."""
    ps, _ = batch_pixel_ps(model, weights, [sample], [label], variant)
    return ps[0]


@dataclass
class PsReport:
    variant: str
    per_sample_ps: np.ndarray  # (n, 25), NaN = undefined
    labels: np.ndarray
    max_abs_map: dict[int, np.ndarray]
    min_signed: dict[int, np.ndarray]
    max_signed: dict[int, np.ndarray]
    bin_edges: np.ndarray
    hist_counts: np.ndarray  # (25, bins)
    undefined_counts: np.ndarray  # (25,)

    def pooled_abs_mean(self) -> float:
        return float(np.nanmean(np.abs(self.per_sample_ps)))

    def normalized_dispersion(self) -> float:
        """Per-pixel sample std divided by per-pixel mean |PS|, averaged over pixels."""
        ps = self.per_sample_ps
        std = np.nanstd(ps, axis=0, ddof=1)
        mean_abs = np.nanmean(np.abs(ps), axis=0)
        return float(np.mean(std / mean_abs))


def _nan_reduce(fn, a: np.ndarray) -> np.ndarray:
    out = np.full(a.shape[1], np.nan)
    for p in range(a.shape[1]):
        col = a[:, p]
        col = col[~np.isnan(col)]
        if col.size:
            out[p] = fn(col)
    return out


def ps_report(model: ModelGraph, weights, split: Split, variant: str = "fractional", bins: int = 50) -> PsReport:
    if len(split) == 0:
        raise ValueError(f"split {split.name!r} is empty")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    ps, _ = batch_pixel_ps(model, weights, split.images, split.labels, variant)
    max_abs, lo_s, hi_s = {}, {}, {}
    for c in (0, 1):
        rows = ps[split.labels == c]
        if len(rows) == 0:
            max_abs[c] = lo_s[c] = hi_s[c] = np.full(N_PIXELS, np.nan)
            continue
        max_abs[c] = _nan_reduce(lambda v: np.max(np.abs(v)), rows)
        lo_s[c] = _nan_reduce(np.min, rows)
        hi_s[c] = _nan_reduce(np.max, rows)

    defined = ~np.isnan(ps)
    if defined.any():
        lo, hi = float(np.min(ps[defined])), float(np.max(ps[defined]))
    else:
        lo, hi = 0.0, 0.0
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    counts = np.zeros((N_PIXELS, bins), dtype=np.int64)
    for p in range(N_PIXELS):
        counts[p], _ = np.histogram(ps[defined[:, p], p], bins=edges)
    return PsReport(
        variant=variant,
        per_sample_ps=ps,
        labels=split.labels.copy(),
        max_abs_map=max_abs,
        min_signed=lo_s,
        max_signed=hi_s,
        bin_edges=edges,
        hist_counts=counts,
        undefined_counts=(~defined).sum(axis=0),
    )
