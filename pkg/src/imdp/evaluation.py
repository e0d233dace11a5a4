"""Evaluation protocol: code sweeps, the utility-vs-privacy classifier
experiment, training-curve statistics, and timing overhead.

The evaluator never touches the privacy engine: classifiers train on
generated data with plain gradient descent and are scored on real
held-out rows only.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import spearmanr

from .autodiff import Graph, ParamStore, backward, forward
from .data import Dataset, bytes_from_features
from .latent import Codes, LatentSpec, softmax
from .nets import CriticQNet, GeneratorNet, generate, q_posterior
from .train import MetricsLog, TrainConfig, train


@dataclass
class SweepGrid:
    """Generated samples arranged category-by-column, code-value-by-row."""

    values: np.ndarray       # (rows, cols, d)
    cont_values: np.ndarray  # (rows,)
    cat_index: int
    cont_index: int

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def to_pgm(self, path, img_side: int) -> None:
        """Tile the grid into one portable graymap (binary P5)."""
        d = self.values.shape[2]
        if img_side * img_side != d:
            raise ValueError(f"data dim {d} is not {img_side}x{img_side}")
        canvas = np.zeros((self.rows * img_side, self.cols * img_side), dtype=np.uint8)
        for r in range(self.rows):
            for c in range(self.cols):
                img = bytes_from_features(self.values[r, c]).reshape(img_side, img_side)
                canvas[r * img_side:(r + 1) * img_side,
                       c * img_side:(c + 1) * img_side] = img
        header = f"P5\n{canvas.shape[1]} {canvas.shape[0]}\n255\n".encode("ascii")
        with open(path, "wb") as f:
            f.write(header + canvas.tobytes())

    def to_table(self) -> str:
        """Comma-separated rows: category, code value, then the features."""
        d = self.values.shape[2]
        lines = ["category,code_value," + ",".join(f"x{i}" for i in range(d))]
        for r in range(self.rows):
            for c in range(self.cols):
                feats = ",".join(repr(float(v)) for v in self.values[r, c])
                lines.append(f"{c},{float(self.cont_values[r])!r},{feats}")
        return "\n".join(lines) + "\n"


def code_sweep(gen: GeneratorNet, spec: LatentSpec, seed: int,
               cont_steps: int = 10, cat_index: int = 0,
               cont_index: int = 0) -> SweepGrid:
    """Enumerate one categorical code across columns against an even grid
    of one continuous code across rows, with a fixed noise draw per row."""
    if cont_steps < 2:
        raise ValueError("cont_steps must be >= 2")
    if spec.input_width != gen.input_width:
        raise ValueError("latent spec does not match generator input width")
    if not spec.categorical:
        raise ValueError("sweep needs a categorical code")
    k = spec.categorical[cat_index]
    rng = np.random.default_rng(seed)
    z_rows = rng.standard_normal((cont_steps, spec.z_dim))
    lo, hi = spec.continuous[cont_index] if spec.n_cont else (0.0, 0.0)
    cont_values = (np.linspace(lo, hi, cont_steps) if spec.n_cont
                   else np.zeros(cont_steps))
    batch = cont_steps * k
    z = np.repeat(z_rows, k, axis=0)
    onehots = []
    for i, ki in enumerate(spec.categorical):
        oh = np.zeros((batch, ki))
        if i == cat_index:
            oh[np.arange(batch), np.tile(np.arange(k), cont_steps)] = 1.0
        else:
            oh[:, 0] = 1.0
        onehots.append(oh)
    cont = None
    if spec.n_cont:
        cont = np.zeros((batch, spec.n_cont))
        for j, (clo, chi) in enumerate(spec.continuous):
            cont[:, j] = 0.5 * (clo + chi)
        cont[:, cont_index] = np.repeat(cont_values, k)
    codes = Codes(z=z, cat_onehot=onehots, cont=cont, spec=spec)
    samples = generate(gen, codes)
    return SweepGrid(values=samples.reshape(cont_steps, k, -1),
                     cont_values=cont_values, cat_index=cat_index,
                     cont_index=cont_index)


class Classifier:
    """Small feed-forward binary classifier trained by plain SGD."""

    def __init__(self, dim: int, labels: tuple[int, int], hidden: int = 64,
                 seed: int = 0):
        self.labels = labels
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.store.add("c.h.W", rng.uniform(-0.05, 0.05, size=(dim, hidden)))
        self.store.add("c.h.b", np.zeros(hidden))
        self.store.add("c.out.W", rng.uniform(-0.05, 0.05, size=(hidden, 2)))
        self.store.add("c.out.b", np.zeros(2))
        self.dim = dim
        self.hidden = hidden
        self._graphs: dict[int, tuple] = {}

    def _graph(self, batch: int):
        if batch not in self._graphs:
            g = Graph()
            x = g.input("x", (batch, self.dim))
            h = g.relu(g.affine(x, g.param("c.h.W", (self.dim, self.hidden)),
                                g.param("c.h.b", (self.hidden,))))
            logits = g.affine(h, g.param("c.out.W", (self.hidden, 2)),
                              g.param("c.out.b", (2,)))
            t = g.input("t", (batch, 2))
            loss = g.softmax_xent(logits, t)
            self._graphs[batch] = (g, logits, loss)
        return self._graphs[batch]

    def logits(self, x: np.ndarray) -> np.ndarray:
        g, logits, _ = self._graph(x.shape[0])
        return forward(g, self.store, {"x": x, "t": np.zeros((x.shape[0], 2))})[logits]

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Predicted labels, mapped back to the original label pair."""
        idx = self.logits(x).argmax(axis=1)
        return np.where(idx == 0, self.labels[0], self.labels[1])

    def accuracy(self, ds: Dataset) -> float:
        if ds.y is None:
            raise ValueError("dataset has no labels")
        return float((self.predict(ds.x) == ds.y).mean())


def train_binary_classifier(ds: Dataset, epochs: int = 100, seed: int = 0,
                            lr: float = 1e-3, batch: int = 64) -> Classifier:
    """Cross-entropy training over shuffled epochs; deterministic by seed."""
    if ds.y is None:
        raise ValueError("dataset has no labels")
    labels = tuple(sorted(set(int(v) for v in ds.y)))
    if len(labels) != 2:
        raise ValueError(f"need exactly two labels, got {labels}")
    clf = Classifier(dim=ds.dim, labels=labels, seed=seed)
    onehot = np.zeros((ds.n, 2))
    onehot[np.arange(ds.n), (ds.y == labels[1]).astype(int)] = 1.0
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(ds.n)
        for lo in range(0, ds.n - batch + 1, batch):
            rows = order[lo:lo + batch]
            g, _, loss = clf._graph(batch)
            acts = forward(g, clf.store, {"x": ds.x[rows], "t": onehot[rows]})
            grads = backward(g, clf.store, acts, loss)
            for name in clf.store.params:
                clf.store.params[name] -= lr * grads[name]
    return clf


def map_categories_to_labels(critic: CriticQNet, mapping_data: Dataset,
                             cat_index: int = 0) -> tuple[dict[int, int], bool]:
    """Majority-vote identification of which category emits which label.

    Returns (label -> category) plus a flag marking any vote tie, which
    is broken deterministically toward the lower category id.
    """
    if mapping_data.y is None:
        raise ValueError("mapping data needs labels")
    logits = q_posterior(critic, mapping_data.x).cat_logits[cat_index]
    assigned = logits.argmax(axis=1)
    k = logits.shape[1]
    mapping: dict[int, int] = {}
    tie = False
    for label in sorted(set(int(v) for v in mapping_data.y)):
        counts = np.bincount(assigned[mapping_data.y == label], minlength=k)
        best = int(counts.argmax())  # argmax takes the lower id on ties
        if (counts == counts[best]).sum() > 1:
            tie = True
        mapping[label] = best
    return mapping, tie


@dataclass(frozen=True)
class UtilityRow:
    epsilon: float
    train_source: str
    accuracy: float
    n_train: int
    n_test: int
    mapping_tie: bool


@dataclass
class UtilityReport:
    rows: list[UtilityRow]
    test_split_sha256: str

    def to_csv(self) -> str:
        lines = ["epsilon,train_source,accuracy,n_train,n_test,mapping_tie"]
        for r in self.rows:
            eps = "inf" if r.epsilon == float("inf") else repr(r.epsilon)
            lines.append(f"{eps},{r.train_source},{r.accuracy!r},"
                         f"{r.n_train},{r.n_test},{int(r.mapping_tie)}")
        return "\n".join(lines) + "\n"

    def accuracies(self) -> dict[float, float]:
        return {r.epsilon: r.accuracy for r in self.rows}

    def spearman(self) -> float:
        """Rank correlation between privacy level and accuracy."""
        eps = [r.epsilon for r in self.rows]
        acc = [r.accuracy for r in self.rows]
        return float(spearmanr(eps, acc).statistic)


def dataset_sha256(ds: Dataset) -> str:
    h = hashlib.sha256(np.ascontiguousarray(ds.x).tobytes())
    if ds.y is not None:
        h.update(np.ascontiguousarray(ds.y).tobytes())
    return h.hexdigest()


def _generate_labeled(gen: GeneratorNet, spec: LatentSpec, category: int,
                      label: int, count: int, rng: np.random.Generator,
                      cat_index: int = 0) -> Dataset:
    z = rng.standard_normal((count, spec.z_dim))
    onehots = []
    for i, k in enumerate(spec.categorical):
        oh = np.zeros((count, k))
        oh[:, category if i == cat_index else 0] = 1.0
        onehots.append(oh)
    cont = None
    if spec.n_cont:
        cols = [rng.uniform(lo, hi, size=count) for lo, hi in spec.continuous]
        cont = np.stack(cols, axis=1)
    x = generate(gen, Codes(z=z, cat_onehot=onehots, cont=cont, spec=spec))
    return Dataset(x=x, y=np.full(count, label), source=f"generated:cat={category}")


def utility_privacy_curve(models: dict[float, tuple[GeneratorNet, CriticQNet]],
                          pair: tuple[int, int], real_test: Dataset,
                          map_data: Dataset, per_class: int = 2000,
                          epochs: int = 100, seed: int = 0) -> UtilityReport:
    """Per privacy level: identify the label categories, generate a
    training split, fit a binary classifier, and score it on real rows.

    Every level reuses the same seed so identical models earn identical
    accuracies; rows come back sorted by descending privacy level.
    """
    a, b = int(pair[0]), int(pair[1])
    if real_test.y is None:
        raise ValueError("real test data needs labels")
    keep = np.isin(real_test.y, (a, b))
    if not keep.any():
        raise ValueError(f"test split holds no rows labeled {a} or {b}")
    test = Dataset(x=real_test.x[keep], y=real_test.y[keep],
                   source=f"{real_test.source}|pair={a}-{b}")
    rows = []
    for eps in sorted(models, reverse=True):
        gen, critic = models[eps]
        spec = gen.cfg.latent
        mapping, tie = map_categories_to_labels(critic, map_data)
        rng = np.random.default_rng(seed)
        parts = [_generate_labeled(gen, spec, mapping[lbl], lbl, per_class, rng)
                 for lbl in (a, b)]
        train_ds = Dataset(x=np.concatenate([p.x for p in parts]),
                           y=np.concatenate([p.y for p in parts]),
                           source=f"generated:eps={eps}")
        clf = train_binary_classifier(train_ds, epochs=epochs, seed=seed)
        rows.append(UtilityRow(
            epsilon=eps, train_source=train_ds.source,
            accuracy=clf.accuracy(test), n_train=train_ds.n, n_test=test.n,
            mapping_tie=tie))
    return UtilityReport(rows=rows, test_split_sha256=dataset_sha256(test))


@dataclass(frozen=True)
class CurveStats:
    mean: float
    var: float
    first_half_mean: float
    first_half_var: float
    second_half_mean: float
    second_half_var: float


def curve_stats(log: MetricsLog, field: str, window: int | None = None) -> CurveStats:
    """Means and variances of a logged field, whole and split into halves.

    ``window`` restricts the view to the trailing records first.
    """
    if len(log) == 0:
        raise ValueError("empty metrics log")
    series = log.series(field)
    if window is not None:
        series = series[-window:]
    mid = len(series) // 2
    first, second = series[:mid], series[mid:]
    return CurveStats(
        mean=float(series.mean()), var=float(series.var()),
        first_half_mean=float(first.mean()) if first.size else float("nan"),
        first_half_var=float(first.var()) if first.size else float("nan"),
        second_half_mean=float(second.mean()), second_half_var=float(second.var()))


@dataclass(frozen=True)
class TimingReport:
    private_ms: float
    nonprivate_ms: float

    @property
    def ratio(self) -> float:
        return self.private_ms / self.nonprivate_ms


def timing_overhead(config: TrainConfig, data: Dataset) -> TimingReport:
    """Wall-clock of the private path against the matched non-private path."""
    if config.epsilon == float("inf"):
        raise ValueError("config must request a finite privacy level")
    private = train(config, data)
    nonprivate = train(replace(config, epsilon=float("inf")), data)
    return TimingReport(private_ms=private.wall_seconds * 1e3,
                        nonprivate_ms=nonprivate.wall_seconds * 1e3)
