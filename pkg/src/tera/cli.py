"""Command-line front end.

Subcommands: features, synth, pretrain, extract, probe, gradcheck, selftest.
Exit status is 0 on success, 1 for invalid input or configuration and 2 for
runtime faults (including a failed verification suite).
"""

import argparse
import json
import logging
import os
import sys
from importlib import resources

import numpy as np

from .alteration import alter
from .checkpoint import load_checkpoint
from .checks import gradcheck_report, selftest_report
from .encoder import encode, params_from_arrays, preset, reconstruct
from .errors import ConfigError, DataError, TeraError, ValidationError
from .features import cmvn_per_speaker, fbank, load_features, mfcc, read_wav, save_features
from .manifest import read_labels, read_manifest, write_labels, write_manifest
from .pretrain import TrainConfig, _build, masked_reconstruction_l1, pretrain_run
from .probes import ProbeSpec, format_table, train_probe
from .rng import Rng, derive_seed
from .synthetic import SyntheticSpec, generate
from .transfer import TransferConfig, extract_batch, representation_matrix

log = logging.getLogger("tera")

CONFIG_KEYS = ("train", "synthetic")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# configuration

def _resolve_config_path(path):
    if os.path.exists(path):
        return path
    bundled = resources.files("tera") / "configs" / os.path.basename(path)
    if bundled.is_file():
        return str(bundled)
    raise DataError(f"{path}: config file not found")


def load_run_config(path):
    """Read a run config: ``{"train": {...}, "synthetic": {...}}``.

    ``train.model`` may name a ``preset`` whose fields the remaining keys
    override.  Returns ``(TrainConfig, SyntheticSpec or None)``.
    """
    path = _resolve_config_path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"{path}: unknown field(s) {', '.join(unknown)}")
    try:
        return parse_run_config(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_run_config(raw):
    train = dict(raw.get("train", {}))
    model = train.get("model")
    if isinstance(model, dict) and "preset" in model:
        model = dict(model)
        name = model.pop("preset")
        train["model"] = preset(name, **model)
    cfg = TrainConfig.from_dict(train)
    synth = raw.get("synthetic")
    spec = _build(SyntheticSpec, synth, "synthetic") if synth is not None else None
    return cfg, spec


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# subcommands

def cmd_features(args):
    manifest = read_manifest(args.manifest)
    os.makedirs(args.out_dir, exist_ok=True)
    extract = fbank if args.kind == "fbank" else mfcc
    feats = []
    for utt, spk, path, _ in manifest:
        samples, rate = read_wav(path)
        try:
            feats.append(extract(samples.astype(np.float64), rate, utterance_id=utt, speaker_id=spk))
        except ValidationError as exc:
            raise type(exc)(f"{path}: {exc}") from None
    if not args.no_cmvn:
        feats = cmvn_per_speaker(feats)
    rows = []
    for fm, (utt, spk, _, lab) in zip(feats, manifest):
        out = os.path.join(args.out_dir, f"{utt}.tfea")
        save_features(out, fm)
        rows.append((utt, spk, out, lab))
    write_manifest(os.path.join(args.out_dir, "manifest.tsv"), rows)
    print(f"wrote {len(rows)} feature files ({args.kind}, {feats[0].n_channels} channels) to {args.out_dir}")
    return 0


def write_synthetic(spec, out_dir):
    """Materialize the synthetic corpus as TFEA1 files, label files and one manifest per split."""
    for split in ("train", "dev", "test"):
        d = os.path.join(out_dir, split)
        os.makedirs(d, exist_ok=True)
        rows = []
        for u in generate(spec, split):
            fm = u.features
            p = save_features_path(d, fm)
            lab = write_labels(os.path.join(d, f"{fm.utterance_id}.lab"), u.phones)
            rows.append((fm.utterance_id, fm.speaker_id, p, lab))
        write_manifest(os.path.join(out_dir, f"{split}.tsv"), rows)
    _write_json(os.path.join(out_dir, "synthetic.json"), spec.to_dict())


def save_features_path(directory, fm):
    path = os.path.join(directory, f"{fm.utterance_id}.tfea")
    save_features(path, fm)
    return path


def cmd_synth(args):
    raw = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
    spec = _build(SyntheticSpec, raw, "synthetic")
    if args.seed is not None:
        spec.seed = args.seed
    write_synthetic(spec, args.out_dir)
    print(f"wrote synthetic corpus (seed {spec.seed}) to {args.out_dir}")
    return 0


def _load_manifest_features(manifest):
    feats = []
    for utt, _, path, _ in manifest:
        fm = load_features(path)
        if fm.utterance_id != utt:
            raise DataError(f"{path}: file holds utterance {fm.utterance_id!r}, manifest says {utt!r}")
        feats.append(fm)
    return feats


def cmd_pretrain(args):
    cfg, spec = load_run_config(args.config)
    if args.seed is not None or args.total_steps is not None:
        d = cfg.to_dict()
        if args.seed is not None:
            d["seed"] = args.seed
        if args.total_steps is not None:
            d["total_steps"] = args.total_steps
        cfg = TrainConfig.from_dict(d)
    if args.train:
        feats = _load_manifest_features(read_manifest(args.train))
        held_out = feats
    else:
        spec = spec or SyntheticSpec()
        feats = [u.features for u in generate(spec, "train")]
        held_out = [u.features for u in generate(spec, "test")]

    report_dir = args.report_dir or args.out
    os.makedirs(report_dir, exist_ok=True)
    every = max(1, cfg.total_steps // 20)

    def progress(step, loss):
        if step % every == 0 or step == cfg.total_steps:
            log.info("step %d/%d loss %.5f", step, cfg.total_steps, loss)

    ckpt = pretrain_run(feats, cfg, args.out, resume=not args.no_resume, dump_alterations=args.dump_alterations, progress=progress)
    write_pretrain_report(ckpt, cfg, spec if not args.train else None, feats, held_out, report_dir)
    last = ckpt.loss_history[-1][1] if ckpt.loss_history else float("nan")
    print(f"finished {ckpt.step} steps; final loss {last:.5f}; checkpoint {os.path.join(args.out, 'final.tckp')}")
    return 0


def write_pretrain_report(ckpt, cfg, spec, train_feats, eval_feats, report_dir):
    """Resolved config, loss table, summary numbers and figures side by side."""
    from . import plotting
    from .pretrain import write_loss_history

    _write_json(os.path.join(report_dir, "config.json"), {"train": cfg.to_dict(), "synthetic": spec.to_dict() if spec else None})
    write_loss_history(os.path.join(report_dir, "loss_history.csv"), ckpt.loss_history)
    plotting.loss_curve(ckpt.loss_history, os.path.join(report_dir, "loss_curve.png"))

    mean = np.concatenate([f.frames for f in train_feats]).mean(axis=0)
    model_l1, base_l1 = masked_reconstruction_l1(ckpt, eval_feats, cfg.alteration, derive_seed(cfg.seed, 41), mean)
    _write_json(
        os.path.join(report_dir, "summary.json"),
        {
            "steps": ckpt.step,
            "final_loss": ckpt.loss_history[-1][1] if ckpt.loss_history else None,
            "masked_l1_model": model_l1,
            "masked_l1_channel_mean": base_l1,
            "masked_l1_ratio": model_l1 / base_l1,
        },
    )

    x = eval_feats[0].frames
    x_hat, rec = alter(x, cfg.alteration, Rng(derive_seed(cfg.seed, 42)))
    enc = params_from_arrays(ckpt.group("encoder"), requires_grad=False)
    head = params_from_arrays(ckpt.group("head"), requires_grad=False)
    pred = reconstruct(encode(x_hat, enc, cfg.model)[-1], head, cfg.model.activation).data
    plotting.alteration_panels(x, x_hat, rec, os.path.join(report_dir, "alteration_example.png"), prediction=pred)


def _transfer_config(layer, ws_weights):
    if layer == "last":
        return TransferConfig("extract_last")
    weights = None
    if ws_weights:
        try:
            weights = np.array([float(v) for v in ws_weights.split(",")])
        except ValueError:
            raise ConfigError(f"--ws-weights must be comma-separated numbers, got {ws_weights!r}") from None
    return TransferConfig("extract_ws", ws_weights=weights)


def cmd_extract(args):
    ckpt = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.manifest)
    feats = _load_manifest_features(manifest)
    tc = _transfer_config(args.layer, args.ws_weights)
    os.makedirs(args.out_dir, exist_ok=True)
    rows = []
    for i in range(0, len(feats), args.batch_size):
        chunk = feats[i : i + args.batch_size]
        for fm, rep, row in zip(chunk, extract_batch(chunk, ckpt, tc), manifest.rows[i : i + args.batch_size]):
            out = save_features_path(args.out_dir, representation_matrix(fm, rep))
            rows.append((row[0], row[1], out, row[3]))
    write_manifest(os.path.join(args.out_dir, "manifest.tsv"), rows)
    print(f"wrote {len(rows)} representations (layer {args.layer}) to {args.out_dir}")
    return 0


def _probe_examples(manifest, feats, task, speakers):
    out = []
    for fm, (utt, spk, _, lab) in zip(feats, manifest):
        if task == "phone_frame":
            if not lab:
                raise DataError(f"{manifest.source}: phone_frame needs a label_path for {utt!r}")
            y = read_labels(lab)
            if y.size != fm.n_frames:
                raise DataError(f"{lab}: {y.size} labels for {fm.n_frames} frames")
        else:
            if spk not in speakers:
                raise DataError(f"{manifest.source}: speaker {spk!r} does not occur in the training manifest")
            idx = speakers.index(spk)
            y = np.full(fm.n_frames, idx, dtype=np.int64) if task == "speaker_frame" else idx
        out.append((fm.frames, y))
    return out


def shuffle_labels(examples, seed):
    """Permute labels across the whole set (frames or utterances), keeping each utterance's length."""
    gen = Rng(seed).numpy_generator()
    if np.ndim(examples[0][1]) == 0:
        ys = gen.permutation(np.array([y for _, y in examples]))
        return [(x, int(y)) for (x, _), y in zip(examples, ys)]
    flat = gen.permutation(np.concatenate([y for _, y in examples]))
    out, pos = [], 0
    for x, y in examples:
        out.append((x, flat[pos : pos + y.size]))
        pos += y.size
    return out


def cmd_probe(args):
    train_m = read_manifest(args.train)
    test_m = read_manifest(args.test)
    dev_m = read_manifest(args.dev) if args.dev else None
    sets = [(train_m, _load_manifest_features(train_m)), (test_m, _load_manifest_features(test_m))]
    if dev_m is not None:
        sets.append((dev_m, _load_manifest_features(dev_m)))
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        tc = _transfer_config(args.layer, args.ws_weights)
        sets = [(m, [representation_matrix(f, r) for f, r in zip(fs, extract_batch(fs, ckpt, tc))]) for m, fs in sets]
    speakers = train_m.speakers()
    data = [_probe_examples(m, fs, args.task, speakers) for m, fs in sets]
    if args.shuffle_labels:
        data = [shuffle_labels(d, derive_seed(args.seed, 51, i)) for i, d in enumerate(data)]
    n_classes = args.n_classes
    if n_classes is None:
        if args.task == "phone_frame":
            n_classes = int(max(int(np.max(y)) for d in data for _, y in d)) + 1
        else:
            n_classes = len(speakers)
    spec = ProbeSpec(
        task=args.task,
        classifier=args.classifier,
        n_classes=n_classes,
        lr=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
    )
    label = args.label or (f"{args.layer} layer" if args.checkpoint else "input features")
    report = train_probe(data[0], data[1], spec, seed=args.seed, dev=data[2] if dev_m else None, label=label)
    table = format_table([report])
    print(table)
    if args.out:
        from . import plotting

        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "probe_report.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
        with open(os.path.join(args.out, "probe_report.txt"), "w", encoding="utf-8") as fh:
            fh.write(table + "\n")
        plotting.probe_bars([report], os.path.join(args.out, "probe_accuracy.png"))
    return 0


def _emit(text, out):
    sys.stdout.write(text)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)


def cmd_gradcheck(args):
    text, ok = gradcheck_report(args.seed, args.directions)
    _emit(text, args.out)
    return 0 if ok else 2


def cmd_selftest(args):
    text, ok = selftest_report(args.seed, args.draws)
    _emit(text, args.out)
    return 0 if ok else 2


# ---------------------------------------------------------------------------
# parser

def build_parser():
    p = _Parser(prog="tera", description="Masked-reconstruction speech representation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("features", help="WAV manifest -> TFEA1 feature files (+ per-speaker CMVN)")
    s.add_argument("--manifest", required=True, help="TSV manifest of 16 kHz mono WAV files")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--kind", choices=("fbank", "mfcc"), default="fbank")
    s.add_argument("--no-cmvn", action="store_true", help="skip per-speaker mean/variance normalization")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("synth", help="write the seeded synthetic corpus (features, labels, manifests)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--config", help="JSON object of synthetic corpus fields")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="self-supervised pre-training from a JSON config")
    s.add_argument("--config", required=True, help="run config (a bundled name such as micro.json also works)")
    s.add_argument("--train", help="TSV manifest of TFEA1 files; default is the synthetic corpus")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--report-dir", help="where figures and tables go (default: --out)")
    s.add_argument("--seed", type=int, help="override train.seed")
    s.add_argument("--total-steps", type=int, help="override train.total_steps")
    s.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints in --out")
    s.add_argument("--dump-alterations", metavar="FILE", help="append one JSON line per altered utterance")
    s.set_defaults(func=cmd_pretrain)

    def transfer_flags(s):
        s.add_argument("--layer", choices=("last", "ws"), default="last", help="last layer or weighted sum of layers")
        s.add_argument("--ws-weights", help="comma-separated per-layer logits for --layer ws (default: equal)")

    s = sub.add_parser("extract", help="dump encoder representations as TFEA1 files")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--batch-size", type=int, default=16)
    transfer_flags(s)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("probe", help="train and evaluate a probe classifier")
    s.add_argument("--task", choices=("phone_frame", "speaker_frame", "speaker_utterance"), required=True)
    s.add_argument("--classifier", choices=("linear", "hidden1", "concat8_linear"), default="linear")
    s.add_argument("--train", required=True, help="TSV manifest (label_path column needed for phone_frame)")
    s.add_argument("--test", required=True)
    s.add_argument("--dev", help="optional manifest for best-epoch selection")
    s.add_argument("--checkpoint", help="extract representations with this checkpoint first")
    transfer_flags(s)
    s.add_argument("--n-classes", type=int, help="default: inferred from the labels")
    s.add_argument("--lr", type=float, default=4e-3)
    s.add_argument("--batch-size", type=int, default=6)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--shuffle-labels", action="store_true", help="permute labels (chance-level sanity check)")
    s.add_argument("--label", help="row name in the report table")
    s.add_argument("--out", help="directory for the JSON report, text table and figure")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("gradcheck", help="64-bit finite-difference check of the training gradient")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--directions", type=int, default=100)
    s.add_argument("--out", help="also write the report to this file")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("selftest", help="statistical checks of the alteration sampler")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--draws", type=int, default=100_000)
    s.add_argument("--out", help="also write the report to this file")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TeraError, ArithmeticError, OSError) as exc:
        print(f"fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime fault
        print(f"fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
