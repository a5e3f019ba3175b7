"""TSV manifests and per-frame label files."""

import csv
import os

import numpy as np

from .errors import DataError, FormatError

COLUMNS = ("utterance_id", "speaker_id", "path")
LABEL_COLUMN = "label_path"


class Manifest:
    """Rows of ``(utterance_id, speaker_id, path, label_path or None)`` with absolute paths."""

    def __init__(self, rows, source="<memory>"):
        self.rows = list(rows)
        self.source = source
        seen = set()
        for utt, spk, _, _ in self.rows:
            if utt in seen:
                raise DataError(f"{source}: duplicate utterance_id {utt!r}")
            if not spk:
                raise DataError(f"{source}: utterance {utt!r} has an empty speaker_id")
            seen.add(utt)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    @property
    def has_labels(self):
        return bool(self.rows) and all(r[3] for r in self.rows)

    def speakers(self):
        return sorted({r[1] for r in self.rows})


def read_manifest(path, check_paths=True):
    """Parse a tab-separated manifest; relative paths are taken from the manifest's directory."""
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty manifest (a header line is required)") from None
        if tuple(header[:3]) != COLUMNS or header[3:] not in ([], [LABEL_COLUMN]):
            raise FormatError(f"{path}: header must be {'/'.join(COLUMNS)}[/{LABEL_COLUMN}], got {'/'.join(header)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or rec == [""]:
                continue
            if len(rec) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            utt, spk, p = rec[:3]
            p = os.path.join(base, p)
            lab = os.path.join(base, rec[3]) if len(rec) > 3 and rec[3] else None
            for f in (p, lab):
                if check_paths and f is not None and not os.path.exists(f):
                    raise DataError(f"{path}:{lineno}: file not found: {f}")
            rows.append((utt, spk, p, lab))
    if not rows:
        raise DataError(f"{path}: manifest lists no utterances")
    return Manifest(rows, source=path)


def write_manifest(path, rows):
    """Write rows of ``(utt, spk, path[, label_path])``; paths are stored relative to the manifest."""
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    rows = list(rows)
    with_labels = any(len(r) > 3 and r[3] for r in rows)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(COLUMNS + ((LABEL_COLUMN,) if with_labels else ()))
        for r in rows:
            rel = [os.path.relpath(os.path.abspath(p), base) for p in r[2:4] if p]
            w.writerow([r[0], r[1], *rel])
    return path


def write_labels(path, labels):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(" ".join(str(int(v)) for v in np.asarray(labels).reshape(-1)) + "\n")
    return path


def read_labels(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read().split()
    try:
        return np.array([int(t) for t in text], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: labels must be integers ({exc})") from None
