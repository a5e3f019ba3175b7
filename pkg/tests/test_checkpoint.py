import struct

import numpy as np
import pytest

from tera.checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from tera.encoder import preset
from tera.errors import FormatError, IncompatibleError
from tera.pretrain import TrainConfig, init_state, state_to_checkpoint


def micro_checkpoint():
    cfg = TrainConfig(total_steps=5, model=preset("micro"))
    return state_to_checkpoint(init_state(cfg), cfg, meta={"note": "x"})


def test_save_load_save_identical(tmp_path):
    ck = micro_checkpoint()
    save_checkpoint(tmp_path / "a.tckp", ck)
    back = load_checkpoint(tmp_path / "a.tckp")
    save_checkpoint(tmp_path / "b.tckp", back)
    assert (tmp_path / "a.tckp").read_bytes() == (tmp_path / "b.tckp").read_bytes()
    assert back.config == ck.config and back.step == ck.step and back.rng_state == ck.rng_state
    for k, v in ck.tensors.items():
        assert back.tensors[k].dtype == v.dtype and back.tensors[k].tobytes() == v.tobytes()


def test_float64_tensors_kept():
    ck = Checkpoint({"a": 1}, 0, {"x/y": np.arange(3.0)})
    back = decode_checkpoint(encode_checkpoint(ck))
    assert back.tensors["x/y"].dtype == np.float64


def test_truncation_and_magic():
    blob = encode_checkpoint(micro_checkpoint())
    for cut in (3, 20, len(blob) // 2, len(blob) - 1):
        with pytest.raises(FormatError):
            decode_checkpoint(blob[:cut])
    with pytest.raises(FormatError):
        decode_checkpoint(b"XXXXX" + blob[5:])


def test_version_mismatch():
    blob = bytearray(encode_checkpoint(micro_checkpoint()))
    struct.pack_into("<I", blob, 5, 2)
    with pytest.raises(IncompatibleError):
        decode_checkpoint(bytes(blob))


def test_micro_checkpoint_small(tmp_path):
    path = save_checkpoint(tmp_path / "m.tckp", micro_checkpoint())
    assert (tmp_path / "m.tckp").stat().st_size < 10 * 2**20
    assert path.endswith("m.tckp")


def test_no_temp_files_left(tmp_path):
    save_checkpoint(tmp_path / "m.tckp", micro_checkpoint())
    assert [p.name for p in tmp_path.iterdir()] == ["m.tckp"]
