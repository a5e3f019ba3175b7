"""Knowledge transfer from a pre-trained encoder: last-layer extraction,
learnable weighted sum over layers, and fine-tuning with a downstream probe."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .alteration import specaugment_mask
from .encoder import encode, params_from_arrays
from .errors import ConfigError, DataError, IncompatibleError
from .features import FeatureKind, FeatureMatrix
from .optim import Adam
from .pretrain import TrainConfig, pad_batch
from .probes import Classifier, concat_windows_batch, cross_entropy
from .rng import Rng, derive_seed

MODES = ("extract_last", "extract_ws", "finetune", "finetune_ws")
BASE_FINETUNE_LR = 2e-4
BASE_DEPTH = 3
MAX_FINETUNE_LAYERS = 24


@dataclass
class TransferConfig:
    mode: str = "extract_last"
    ws_weights: np.ndarray = None  # one logit per layer; None -> all equal
    ws_scale: float = 1.0
    finetune_lr: float = None  # None -> depth-scaled default

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"transfer mode must be one of {MODES}, got {self.mode!r}")

    @property
    def weighted(self):
        return self.mode.endswith("_ws")

    @property
    def finetune(self):
        return self.mode.startswith("finetune")


def finetune_lr_for_depth(n_layers):
    """2e-4 at 3 layers, halved every time the depth doubles."""
    if n_layers >= MAX_FINETUNE_LAYERS:
        raise ConfigError(f"fine-tuning a {n_layers}-layer encoder is refused: 24-layer models are too unstable to fine-tune")
    return BASE_FINETUNE_LR * BASE_DEPTH / n_layers


class Pretrained:
    """Encoder weights and model config pulled from a checkpoint (head discarded)."""

    def __init__(self, ckpt, trainable=False):
        self.cfg = TrainConfig.from_dict(ckpt.config).model
        self.params = params_from_arrays(ckpt.group("encoder"), requires_grad=trainable)

    @property
    def n_layers(self):
        return self.cfg.n_layers

    def check_input(self, H):
        if H != self.cfg.input_dim:
            raise IncompatibleError(f"features have {H} channels, the checkpoint expects {self.cfg.input_dim}")


def weighted_sum(hidden, weights, scale):
    """``scale * sum_i softmax(weights)_i * hidden_i`` (all Tensors)."""
    probs = ad.softmax(weights, axis=-1)
    stacked = ad.stack(hidden, axis=0)
    n = len(hidden)
    w = probs.reshape((n,) + (1,) * (stacked.ndim - 1))
    return (stacked * w).sum(axis=0) * scale


def _ws_tensors(tc, n_layers, trainable):
    w = np.zeros(n_layers, dtype=np.float32) if tc.ws_weights is None else np.asarray(tc.ws_weights, dtype=np.float32)
    if w.shape != (n_layers,):
        raise ConfigError(f"ws_weights needs {n_layers} entries, got {w.shape}")
    return (
        ad.Tensor(w.copy(), requires_grad=trainable, name="ws.weights"),
        ad.Tensor(np.array(tc.ws_scale, dtype=np.float32), requires_grad=trainable, name="ws.scale"),
    )


def extract_representation(x, model, tc=None):
    """Frozen, evaluation-mode representation ``[L, d_model]`` for one utterance.

    ``model`` is a :class:`Pretrained` or a checkpoint.
    """
    tc = tc or TransferConfig()
    if not isinstance(model, Pretrained):
        model = Pretrained(model)
    frames = x.frames if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float32)
    model.check_input(frames.shape[1])
    hidden = encode(frames, model.params, model.cfg)
    if tc.mode in ("extract_last", "finetune"):
        return hidden[-1].data.copy()
    w, s = _ws_tensors(tc, model.n_layers, False)
    return weighted_sum(hidden, w, s).data.copy()


def extract_batch(feats, model, tc=None):
    """Padded batched extraction; returns one ``[L_i, d]`` array per utterance."""
    tc = tc or TransferConfig()
    if not isinstance(model, Pretrained):
        model = Pretrained(model)
    mats = [f.frames if isinstance(f, FeatureMatrix) else np.asarray(f) for f in feats]
    model.check_input(mats[0].shape[1])
    x, mask = pad_batch(mats)
    hidden = encode(x, model.params, model.cfg, mask)
    if tc.mode in ("extract_last", "finetune"):
        rep = hidden[-1].data
    else:
        w, s = _ws_tensors(tc, model.n_layers, False)
        rep = weighted_sum(hidden, w, s).data
    return [rep[i, : m.shape[0]].copy() for i, m in enumerate(mats)]


def representation_matrix(fm, rep):
    """Wrap an extracted representation as an OTHER-kind FeatureMatrix."""
    return FeatureMatrix(fm.utterance_id, fm.speaker_id, rep, FeatureKind.OTHER, fm.frame_shift_ms)


class Downstream:
    """Encoder + optional weighted sum + probe classifier trained end to end.

    Frozen modes build the encoder from non-trainable tensors, so no gradient
    ever reaches it.  Fine-tune modes train the encoder at the depth-scaled
    learning rate and apply SpecAugment masks to training inputs.
    """

    def __init__(self, ckpt, tc, spec, seed=0, specaugment=None):
        self.tc = tc
        self.spec = spec
        if tc.finetune:
            lr = tc.finetune_lr
            depth_lr = finetune_lr_for_depth(TrainConfig.from_dict(ckpt.config).model.n_layers)
            self.encoder_lr = depth_lr if lr is None else lr
        self.model = Pretrained(ckpt, trainable=tc.finetune)
        self.ws = _ws_tensors(tc, self.model.n_layers, True) if tc.weighted else None
        d = self.model.cfg.d_model
        in_dim = d * spec.window if spec.classifier == "concat8_linear" else d
        hidden = (spec.hidden or d) if spec.classifier == "hidden1" else None
        self.classifier = Classifier(in_dim, spec.n_classes, hidden, seed=derive_seed(seed, 31))
        self.specaugment = dict(T=70, F=4, mT=2, mF=2) if specaugment is None else specaugment
        self.rng = Rng(derive_seed(seed, 32))
        self.optimizer = Adam(self.trainable())

    def trainable(self):
        p = dict(self.classifier.params)
        if self.ws is not None:
            p["ws.weights"], p["ws.scale"] = self.ws
        if self.tc.finetune:
            p.update({"encoder." + n: t for n, t in self.model.params.items()})
        return p

    def lr_scale(self):
        if not self.tc.finetune:
            return None
        ratio = self.encoder_lr / self.spec.lr
        return {"encoder." + n: ratio for n in self.model.params}

    def representation(self, mats, train):
        x, mask = pad_batch(mats)
        if train and self.tc.finetune:
            for i, m in enumerate(mats):
                x[i, : m.shape[0]] = specaugment_mask(m, self.rng, **self.specaugment)
        gen = self.rng.numpy_generator() if train else None
        hidden = encode(x, self.model.params, self.model.cfg, mask, train_mode=train and self.tc.finetune, gen=gen)
        rep = weighted_sum(hidden, *self.ws) if self.ws is not None else hidden[-1]
        return rep, mask

    def logits(self, mats, train=False):
        """Logits ``[N, C]`` and the row selection they correspond to."""
        rep, mask = self.representation(mats, train)
        lengths = [m.shape[0] for m in mats]
        if self.spec.frame_level:
            if self.spec.classifier == "concat8_linear":
                rep = concat_windows_batch(rep, lengths, self.spec.window)
            B, L, D = rep.shape
            flat_idx = np.flatnonzero(mask.reshape(-1))
            rows = rep.reshape(B * L, D)[flat_idx]
        else:
            w = mask[..., None].astype(rep.dtype) / np.asarray(lengths, dtype=rep.dtype)[:, None, None]
            rows = (rep * w).sum(axis=1)
        return self.classifier(rows)

    @staticmethod
    def _targets(labels, spec):
        if spec.frame_level:
            return np.concatenate([np.asarray(y, dtype=np.int64).reshape(-1) for y in labels])
        return np.asarray(labels, dtype=np.int64)

    def train_step(self, mats, labels):
        y = self._targets(labels, self.spec)
        if y.size and (y.min() < 0 or y.max() >= self.spec.n_classes):
            raise DataError(f"label outside [0, {self.spec.n_classes})")
        loss = cross_entropy(self.logits(mats, train=True), y)
        params = self.trainable()
        names = list(params)
        value, grads = ad.value_and_grad(loss, [params[n] for n in names])
        self.optimizer.step(params, dict(zip(names, grads)), self.spec.lr, self.lr_scale())
        return value

    def loss(self, mats, labels):
        y = self._targets(labels, self.spec)
        return float(cross_entropy(self.logits(mats), y).data)

    def accuracy(self, mats, labels):
        y = self._targets(labels, self.spec)
        pred = np.argmax(self.logits(mats).data, axis=-1)
        return float((pred == y).mean())

    def normalized_ws(self):
        if self.ws is None:
            return None
        return ad.softmax(ad.Tensor(self.ws[0].data)).data


def build_downstream(ckpt, tc, spec, seed=0, specaugment=None):
    return Downstream(ckpt, tc, spec, seed, specaugment)


def train_downstream(model, mats, labels, steps, seed=0):
    """``steps`` minibatch updates of ``spec.batch_size`` utterances; returns the loss trace."""
    order_rng = Rng(derive_seed(seed, 33))
    bs = model.spec.batch_size
    perm = []
    trace = []
    for _ in range(steps):
        if len(perm) < bs:
            perm += order_rng.permutation(len(mats))
        idx, perm = perm[:bs], perm[bs:]
        trace.append(model.train_step([mats[i] for i in idx], [labels[i] for i in idx]))
    return trace
