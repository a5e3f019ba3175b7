"""Downstream probes: linear / one-hidden-layer / concatenated-window classifiers
for frame-wise phone, frame-wise speaker and utterance-wise speaker tasks."""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, EmptyInputError
from .optim import Adam
from .rng import Rng, derive_seed

TASKS = ("phone_frame", "speaker_frame", "speaker_utterance")
CLASSIFIERS = ("linear", "hidden1", "concat8_linear")


@dataclass
class ProbeSpec:
    task: str = "phone_frame"
    classifier: str = "linear"
    n_classes: int = 41
    lr: float = 4e-3
    batch_size: int = 6
    epochs: int = 20
    hidden: int = None  # defaults to the representation width
    window: int = 8

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"probe.task must be one of {TASKS}, got {self.task!r}")
        if self.classifier not in CLASSIFIERS:
            raise ConfigError(f"probe.classifier must be one of {CLASSIFIERS}, got {self.classifier!r}")
        if self.n_classes < 2:
            raise ConfigError(f"probe.n_classes must be >= 2, got {self.n_classes}")
        if self.classifier == "concat8_linear" and not self.frame_level:
            raise ConfigError("concat8_linear only applies to frame-level tasks")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("probe.batch_size and probe.epochs must be >= 1")

    @property
    def frame_level(self):
        return self.task != "speaker_utterance"

    def to_dict(self):
        return asdict(self)


@dataclass
class ProbeReport:
    spec: ProbeSpec
    train_accuracy: float
    test_accuracy: float
    n_train: int
    n_test: int
    dev_accuracy: float = None
    best_epoch: int = None
    per_class_recall: dict = field(default_factory=dict)
    most_confused: list = field(default_factory=list)  # (true, predicted, count)
    label: str = ""

    @property
    def chance(self):
        return 1.0 / self.spec.n_classes

    def to_dict(self):
        d = asdict(self)
        d["chance"] = self.chance
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def format_table(reports):
    """Aligned plain-text table, one row per report."""
    header = ["representation", "task", "classifier", "classes", "train acc", "test acc", "chance"]
    rows = [
        [
            r.label or "-",
            r.spec.task,
            r.spec.classifier,
            str(r.spec.n_classes),
            f"{100 * r.train_accuracy:.2f}",
            f"{100 * r.test_accuracy:.2f}",
            f"{100 * r.chance:.3f}",
        ]
        for r in reports
    ]
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(header)]
    line = "+".join("-" * (w + 2) for w in widths)
    fmt = lambda cells: "|".join(f" {c:<{w}} " for c, w in zip(cells, widths))  # noqa: E731
    out = [fmt(header), line]
    out += [fmt(r) for r in rows]
    return "\n".join(out)


# ---------------------------------------------------------------------------
# representation transforms

def utterance_pool(rep, pad_mask=None):
    """Mean over (real) frames."""
    rep = np.asarray(rep)
    if pad_mask is not None:
        rep = rep[np.asarray(pad_mask, dtype=bool)]
    if rep.shape[0] == 0:
        raise EmptyInputError("cannot pool an utterance with no frames")
    return rep.mean(axis=0)


def window_indices(length, k=8):
    """``[length, k]`` source frames for each output frame, clamped at the edges."""
    offsets = np.arange(-(k // 2), k - k // 2)
    return np.clip(np.arange(length)[:, None] + offsets[None, :], 0, length - 1)


def concat_windows(rep, k=8):
    """Frame t becomes frames ``t-k//2 .. t+ceil(k/2)-1`` concatenated (edges replicated)."""
    rep = np.asarray(rep)
    L, d = rep.shape
    return rep[window_indices(L, k)].reshape(L, k * d)


def concat_windows_batch(rep, lengths, k=8):
    """Differentiable batched version for a ``[B, L, d]`` Tensor with per-row lengths."""
    B, L, d = rep.shape
    idx = np.zeros((B, L, k), dtype=np.int64)
    for b, n in enumerate(lengths):
        idx[b, :n] = window_indices(n, k)
    rows = np.arange(B)[:, None, None]
    return rep[rows, idx].reshape(B, L, k * d)


# ---------------------------------------------------------------------------
# classifier

class Classifier:
    """Affine (optionally one hidden ReLU layer) mapping features to class logits."""

    def __init__(self, in_dim, n_classes, hidden=None, seed=0, dtype=np.float32):
        gen = Rng(seed).numpy_generator()

        def affine(prefix, fan_in, fan_out):
            bound = 1.0 / math.sqrt(fan_in)
            w = gen.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)
            b = gen.uniform(-bound, bound, (fan_out,)).astype(dtype)
            self.params[prefix + ".weight"] = ad.Tensor(w, requires_grad=True, name=prefix + ".weight")
            self.params[prefix + ".bias"] = ad.Tensor(b, requires_grad=True, name=prefix + ".bias")

        self.params = {}
        self.hidden = hidden
        if hidden:
            affine("clf.0", in_dim, hidden)
            affine("clf.1", hidden, n_classes)
        else:
            affine("clf.0", in_dim, n_classes)

    def __call__(self, x):
        p = self.params
        h = x @ p["clf.0.weight"] + p["clf.0.bias"]
        if self.hidden:
            h = ad.relu(h) @ p["clf.1.weight"] + p["clf.1.bias"]
        return h


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``[N, C]`` logits."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = ad.log_softmax(logits, axis=-1)
    picked = logp[np.arange(labels.size), labels]
    return -picked.mean()


# ---------------------------------------------------------------------------
# training

def _check_labels(labels, n_classes, where):
    flat = np.concatenate([np.atleast_1d(np.asarray(y)) for y in labels]) if labels else np.zeros(0, np.int64)
    if flat.size and (flat.min() < 0 or flat.max() >= n_classes):
        raise DataError(f"{where}: label outside [0, {n_classes})")
    return flat


def _prepare(examples, spec):
    """Turn ``(rep, labels)`` pairs into per-utterance (X, y) groups."""
    groups = []
    for rep, y in examples:
        rep = np.asarray(rep, dtype=np.float32)
        if spec.frame_level:
            y = np.asarray(y, dtype=np.int64).reshape(-1)
            if y.size != rep.shape[0]:
                raise DataError(f"{y.size} frame labels for {rep.shape[0]} frames")
            if spec.classifier == "concat8_linear":
                rep = concat_windows(rep, spec.window)
            groups.append((rep, y))
        else:
            groups.append((utterance_pool(rep)[None, :], np.array([int(y)], dtype=np.int64)))
    return groups


def _accuracy(clf, groups, n_classes=None):
    correct = total = 0
    preds = []
    for X, y in groups:
        p = np.argmax(clf(ad.Tensor(X)).data, axis=-1)
        correct += int((p == y).sum())
        total += y.size
        preds.append(p)
    return (correct / total if total else 0.0), preds


def train_probe(train, test, spec, seed=0, dev=None, label=""):
    """Fit a probe on ``train`` and report accuracy on ``test``.

    Each dataset is a list of ``(representation [L, d], labels)`` where labels
    are per-frame integer arrays for frame tasks or one integer per utterance.
    Minibatches hold ``spec.batch_size`` utterances.  With ``dev`` the epoch
    with the best dev accuracy is kept; otherwise the last epoch.
    """
    if not train or not test:
        raise DataError("probe needs non-empty train and test sets")
    tr_labels = _check_labels([y for _, y in train], spec.n_classes, "train")
    _check_labels([y for _, y in test], spec.n_classes, "test")
    if np.unique(tr_labels).size < 2:
        raise DataError("training labels contain a single class")

    tr = _prepare(train, spec)
    te = _prepare(test, spec)
    dv = _prepare(dev, spec) if dev else None
    in_dim = tr[0][0].shape[1]
    hidden = (spec.hidden or in_dim) if spec.classifier == "hidden1" else None
    clf = Classifier(in_dim, spec.n_classes, hidden, seed=derive_seed(seed, 21))
    names = list(clf.params)
    opt = Adam(clf.params)
    order_rng = Rng(derive_seed(seed, 22))
    best = (-1.0, None, None)
    for epoch in range(spec.epochs):
        order = order_rng.permutation(len(tr))
        for i in range(0, len(order), spec.batch_size):
            chunk = [tr[j] for j in order[i : i + spec.batch_size]]
            X = np.concatenate([c[0] for c in chunk], axis=0)
            y = np.concatenate([c[1] for c in chunk], axis=0)
            loss = cross_entropy(clf(ad.Tensor(X)), y)
            _, grads = ad.value_and_grad(loss, [clf.params[n] for n in names])
            opt.step(clf.params, dict(zip(names, grads)), spec.lr)
        if dv is not None:
            acc, _ = _accuracy(clf, dv)
            if acc > best[0]:
                best = (acc, epoch, {n: t.data.copy() for n, t in clf.params.items()})
    dev_acc = best_epoch = None
    if dv is not None:
        dev_acc, best_epoch, snapshot = best
        for n, arr in snapshot.items():
            clf.params[n].data[...] = arr

    train_acc, _ = _accuracy(clf, tr)
    test_acc, preds = _accuracy(clf, te)
    y_true = np.concatenate([y for _, y in te])
    y_pred = np.concatenate(preds)
    recall = {}
    for c in np.unique(y_true):
        sel = y_true == c
        recall[int(c)] = float((y_pred[sel] == c).mean())
    off = y_true != y_pred
    pairs, counts = np.unique(np.stack([y_true[off], y_pred[off]], axis=1), axis=0, return_counts=True) if off.any() else (np.zeros((0, 2), int), np.zeros(0, int))
    top = np.argsort(-counts, kind="stable")[:5]
    confused = [[int(pairs[i][0]), int(pairs[i][1]), int(counts[i])] for i in top]
    return ProbeReport(
        spec=spec,
        train_accuracy=train_acc,
        test_accuracy=test_acc,
        n_train=int(sum(y.size for _, y in tr)),
        n_test=int(y_true.size),
        dev_accuracy=dev_acc,
        best_epoch=best_epoch,
        per_class_recall=recall,
        most_confused=confused,
        label=label,
    )
