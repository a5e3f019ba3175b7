"""Self-supervised pre-training: alteration, L1 reconstruction, Adam with
warmup / linear decay, and resumable checkpointing."""

import csv
import glob
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .alteration import AlterationConfig, alter
from .autodiff import ContractViolation, NumericFault
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .encoder import ModelConfig, encode, init_params, params_from_arrays, params_to_arrays, reconstruct
from .errors import ConfigError, DataError, IncompatibleError
from .features import Corpus, load_features
from .optim import Adam, clip_by_global_norm
from .rng import Rng, derive_seed

log = logging.getLogger(__name__)

LOSS_SCOPES = ("full_sequence", "altered_only")


@dataclass
class TrainConfig:
    total_steps: int = 200_000
    batch_size: int = 12
    peak_lr: float = 2e-4
    warmup_fraction: float = 0.07
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    loss_scope: str = "full_sequence"
    checkpoint_every: int = 0
    alteration: AlterationConfig = field(default_factory=AlterationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.alteration, dict):
            self.alteration = _build(AlterationConfig, self.alteration, "alteration")
        if isinstance(self.model, dict):
            self.model = _build(ModelConfig, self.model, "model")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must lie in (0, 1), got {self.warmup_fraction}")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.loss_scope not in LOSS_SCOPES:
            raise ConfigError(f"loss_scope must be one of {LOSS_SCOPES}, got {self.loss_scope!r}")

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["alteration"] = self.alteration.to_dict()
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        return _build(cls, d, "train")


def _build(klass, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(klass)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    try:
        return klass(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


# ---------------------------------------------------------------------------
# loss and schedule

def pad_batch(mats, dtype=np.float32):
    """Stack ``[L_i, H]`` matrices into ``[B, L_max, H]`` plus a real-frame mask."""
    L = max(m.shape[0] for m in mats)
    H = mats[0].shape[1]
    out = np.zeros((len(mats), L, H), dtype=dtype)
    mask = np.zeros((len(mats), L), dtype=bool)
    for i, m in enumerate(mats):
        out[i, : m.shape[0]] = m
        mask[i, : m.shape[0]] = True
    return out, mask


def loss_weights(pad_mask, shape, scope="full_sequence", records=None):
    """0/1 weights of the cells that enter the reconstruction loss."""
    w = np.broadcast_to(np.asarray(pad_mask, dtype=bool)[..., None], shape).copy()
    if scope == "altered_only":
        cells = np.zeros(shape, dtype=bool)
        cells3 = cells.reshape((-1,) + shape[-2:])
        for i, rec in enumerate(records or []):
            cells3[i, : rec.n_frames] = rec.altered_cells()
        w &= cells
    elif scope != "full_sequence":
        raise ConfigError(f"unknown loss scope {scope!r}")
    return w


def l1_loss(pred, target, pad_mask, scope="full_sequence", records=None):
    """Mean absolute error over the in-scope, non-padded cells."""
    if not isinstance(pred, ad.Tensor):
        pred = ad.Tensor(np.asarray(pred))
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ContractViolation(f"prediction {pred.shape} and target {target.shape} differ in shape")
    w = loss_weights(pad_mask, pred.shape, scope, records)
    if not w.any():
        raise DataError("no cells in scope for the reconstruction loss (degenerate batch)")
    return ad.l1_mean(pred, target, w)


def _warmup_steps(total_steps, warmup_fraction):
    return float(Fraction(repr(float(warmup_fraction))) * total_steps)


def lr_at_step(step, total_steps, peak_lr=2e-4, warmup_fraction=0.07):
    """Linear warmup from 0 to ``peak_lr`` over ``warmup_fraction * total_steps``, then linear decay to 0."""
    if not 0 <= step <= total_steps:
        raise ContractViolation(f"step {step} outside [0, {total_steps}]")
    warm = _warmup_steps(total_steps, warmup_fraction)
    if math.isclose(step, warm, rel_tol=1e-12):
        # a float step like 0.07 * T can land an ulp away from the exact breakpoint
        return peak_lr
    if step <= warm:
        return peak_lr * (step / warm)
    return peak_lr * ((total_steps - step) / (total_steps - warm))


# ---------------------------------------------------------------------------
# training state

@dataclass
class TrainState:
    step: int
    encoder: dict
    head: dict
    optimizer: Adam
    rng: Rng
    loss_history: list = field(default_factory=list)

    @property
    def params(self):
        p = dict(self.encoder)
        p.update(self.head)
        return p


def init_state(cfg):
    enc, head = init_params(cfg.model, derive_seed(cfg.seed, 1))
    params = dict(enc)
    params.update(head)
    opt = Adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return TrainState(0, enc, head, opt, Rng(derive_seed(cfg.seed, 2)))


def state_to_checkpoint(state, cfg, meta=None):
    tensors = {}
    for n, t in state.encoder.items():
        tensors["encoder/" + n] = t.data.copy()
    for n, t in state.head.items():
        tensors["head/" + n] = t.data.copy()
    for n, a in state.optimizer.m.items():
        tensors["adam_m/" + n] = a.copy()
    for n, a in state.optimizer.v.items():
        tensors["adam_v/" + n] = a.copy()
    return Checkpoint(
        config=cfg.to_dict(),
        step=state.step,
        tensors=tensors,
        rng_state=state.rng.get_state(),
        loss_history=[list(r) for r in state.loss_history],
        meta=dict(meta or {}),
    )


def state_from_checkpoint(ckpt, cfg=None):
    if cfg is None:
        cfg = TrainConfig.from_dict(ckpt.config)
    elif cfg.to_dict() != ckpt.config:
        raise IncompatibleError("checkpoint was written with a different training configuration")
    enc = params_from_arrays(ckpt.group("encoder"))
    head = params_from_arrays(ckpt.group("head"))
    params = dict(enc)
    params.update(head)
    opt = Adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    opt.t = ckpt.step
    for n, a in ckpt.group("adam_m").items():
        opt.m[n] = a.copy()
    for n, a in ckpt.group("adam_v").items():
        opt.v[n] = a.copy()
    rng = Rng.from_state(ckpt.rng_state)
    return TrainState(ckpt.step, enc, head, opt, rng, [list(r) for r in ckpt.loss_history]), cfg


def train_step(state, batch, cfg, record_sink=None):
    """One update on ``batch`` (FeatureMatrix objects or ``[L, H]`` arrays).

    Mutates and returns ``state`` together with the batch loss.  The
    learning rate used is ``lr_at_step(state.step + 1, ...)``.
    """
    if not batch:
        raise DataError("empty batch")
    mats = [getattr(b, "frames", b) for b in batch]
    altered = []
    records = []
    for m in mats:
        x_hat, rec = alter(m, cfg.alteration, state.rng)
        altered.append(x_hat)
        records.append(rec)
    if record_sink is not None:
        record_sink(state.step, records)
    target, mask = pad_batch(mats)
    x_hat, _ = pad_batch(altered)
    gen = state.rng.numpy_generator()
    hidden = encode(x_hat, state.encoder, cfg.model, mask, train_mode=True, gen=gen)
    pred = reconstruct(hidden[-1], state.head, cfg.model.activation)
    loss = l1_loss(pred, target, mask, cfg.loss_scope, records)
    params = state.params
    names = list(params)
    try:
        value, grads = ad.value_and_grad(loss, [params[n] for n in names])
    except NumericFault as exc:
        raise NumericFault(f"step {state.step + 1}: {exc}", exc.node) from exc
    grads, _ = clip_by_global_norm(dict(zip(names, grads)), cfg.grad_clip)
    lr = lr_at_step(state.step + 1, cfg.total_steps, cfg.peak_lr, cfg.warmup_fraction)
    state.optimizer.step(params, grads, lr)
    state.step += 1
    state.loss_history.append([state.step, value, lr])
    return state, value


# ---------------------------------------------------------------------------
# run

def load_corpus_features(corpus):
    feats = []
    for utt, spk, path in corpus.entries:
        fm = load_features(path)
        if fm.utterance_id != utt:
            raise DataError(f"{path}: file holds utterance {fm.utterance_id!r}, manifest says {utt!r}")
        feats.append(fm)
    return feats


class BatchSchedule:
    """Deterministic batches: seeded permutation per epoch, consumed as one stream."""

    def __init__(self, n_items, batch_size, seed):
        if n_items < 1:
            raise DataError("corpus is empty")
        self.n = n_items
        self.batch_size = batch_size
        self.seed = seed
        self._perms = {}

    def epoch_order(self, epoch):
        perm = self._perms.get(epoch)
        if perm is None:
            perm = Rng(derive_seed(self.seed, 3, epoch)).permutation(self.n)
            self._perms = {epoch: perm}
        return perm

    def indices(self, step):
        """Item indices for 0-based ``step``."""
        out = []
        for p in range(step * self.batch_size, (step + 1) * self.batch_size):
            epoch, pos = divmod(p, self.n)
            out.append(self.epoch_order(epoch)[pos])
        return out


def _latest_checkpoint(directory):
    paths = sorted(glob.glob(os.path.join(directory, "ckpt_*.tckp")))
    return paths[-1] if paths else None


def write_loss_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in history:
            w.writerow([step, repr(float(loss)), repr(float(lr))])


def pretrain_run(data, cfg, checkpoint_dir, resume=True, stop_after=None, dump_alterations=None, progress=None):
    """Train for exactly ``cfg.total_steps`` steps and write ``final.tckp``.

    ``data`` is a :class:`Corpus` of TFEA1 files or a list of FeatureMatrix.
    With ``resume`` the newest ``ckpt_*.tckp`` in ``checkpoint_dir`` is picked
    up.  ``stop_after`` ends the run early (after that many total steps) to
    simulate an interruption.  Returns the final :class:`Checkpoint`.
    """
    feats = load_corpus_features(data) if isinstance(data, Corpus) else list(data)
    if not feats:
        raise DataError("corpus is empty")
    H = feats[0].frames.shape[1]
    if H != cfg.model.input_dim:
        raise IncompatibleError(f"features have {H} channels but model.input_dim is {cfg.model.input_dim}")
    os.makedirs(checkpoint_dir, exist_ok=True)

    state = None
    if resume:
        latest = _latest_checkpoint(checkpoint_dir)
        if latest:
            state, _ = state_from_checkpoint(load_checkpoint(latest), cfg)
            log.info("resuming from %s at step %d", latest, state.step)
    if state is None:
        state = init_state(cfg)

    sink = None
    dump_fh = None
    if dump_alterations:
        dump_fh = open(dump_alterations, "a", encoding="utf-8")

        def sink(step, records):
            for i, r in zip(batch_idx, records):
                row = {"step": step + 1, "utterance_id": feats[i].utterance_id, **r.to_dict()}
                dump_fh.write(json.dumps(row, sort_keys=True) + "\n")

    schedule = BatchSchedule(len(feats), cfg.batch_size, cfg.seed)
    end = cfg.total_steps if stop_after is None else min(stop_after, cfg.total_steps)
    try:
        while state.step < end:
            batch_idx = schedule.indices(state.step)
            _, loss = train_step(state, [feats[i] for i in batch_idx], cfg, sink)
            if progress is not None:
                progress(state.step, loss)
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0 and state.step < cfg.total_steps:
                save_checkpoint(os.path.join(checkpoint_dir, f"ckpt_{state.step:09d}.tckp"), state_to_checkpoint(state, cfg))
    finally:
        if dump_fh is not None:
            dump_fh.close()

    ckpt = state_to_checkpoint(state, cfg, meta={"n_utterances": len(feats), "feature_dim": H})
    if state.step >= cfg.total_steps:
        save_checkpoint(os.path.join(checkpoint_dir, "final.tckp"), ckpt)
        write_loss_history(os.path.join(checkpoint_dir, "loss_history.csv"), state.loss_history)
    return ckpt


def masked_reconstruction_l1(ckpt, feats, alteration, seed, baseline_mean):
    """L1 of the model and of a per-channel constant predictor on masked cells.

    Masked cells are frames in zeroed/replaced time blocks plus the zeroed
    channel band.  Returns ``(model_l1, baseline_l1)``.
    """
    cfg = TrainConfig.from_dict(ckpt.config)
    enc = params_from_arrays(ckpt.group("encoder"), requires_grad=False)
    head = params_from_arrays(ckpt.group("head"), requires_grad=False)
    rng = Rng(seed)
    model_err = base_err = 0.0
    count = 0
    for fm in feats:
        x = fm.frames
        x_hat, rec = alter(x, alteration, rng)
        cells = np.zeros(x.shape, dtype=bool)
        for b in rec.time_blocks:
            if b.mode != "keep":
                cells[b.start : b.start + b.width] = True
        cells |= rec.altered_channel_flags[None, :]
        if not cells.any():
            continue
        pred = reconstruct(encode(x_hat, enc, cfg.model)[-1], head, cfg.model.activation).data
        model_err += float(np.abs(pred - x)[cells].sum())
        base_err += float(np.abs(baseline_mean[None, :] - x)[cells].sum())
        count += int(cells.sum())
    if count == 0:
        raise DataError("no masked cells were drawn")
    return model_err / count, base_err / count
