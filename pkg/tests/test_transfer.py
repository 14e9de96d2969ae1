import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from songconv.cyclegan import CycleGAN, DiscriminatorSpec, GatedConv1d, GeneratorSpec
from songconv.errors import DataError, IoFailure, ShapeMismatch
from songconv.transfer import (MAGIC, BadMagic, Checkpoint, CheckpointError, CrcMismatch, MissingTensor,
                               TruncatedFile, VersionUnsupported, decode_checkpoint, encode_checkpoint,
                               flatten_models, format_table, load_checkpoint, save_checkpoint, transfer_init)

TOY = dict(gen_spec=GeneratorSpec(base=4, residual_blocks=1), disc_spec=DiscriminatorSpec(base=2))


def mixed_tensors():
    rng = np.random.default_rng(7)
    return {
        "a.w": rng.standard_normal((3, 4)).astype(np.float32),
        "a.b": rng.standard_normal(5),
        "idx": np.arange(6, dtype=np.int32).reshape(2, 3),
        "big": np.array([2 ** 40, -1], dtype=np.int64),
        "bytes": np.array([0, 255, 7], dtype=np.uint8),
        "scalar": np.array(3.5),
        "empty": np.zeros((0, 4), dtype=np.float32),
    }


def test_round_trip_all_dtypes(tmp_path):
    tensors = mixed_tensors()
    save_checkpoint(tensors, {"epoch": 3, "seed": 1}, tmp_path / "c.ckpt")
    ck = load_checkpoint(tmp_path / "c.ckpt")
    assert list(ck.tensors) == list(tensors)
    for k, v in tensors.items():
        assert ck.tensors[k].dtype == v.dtype and ck.tensors[k].shape == v.shape
        assert ck.tensors[k].tobytes() == v.tobytes()
    assert ck.meta["epoch"] == 3 and "created" in ck.meta


def test_save_load_save_is_byte_identical(tmp_path):
    model = CycleGAN(**TOY, seed=2)
    save_checkpoint(model.models(), {"arch": model.architecture()}, tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), None, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_empty_model_list(tmp_path):
    save_checkpoint({}, {"created": "x"}, tmp_path / "e.ckpt")
    data = (tmp_path / "e.ckpt").read_bytes()
    meta = b'{"created":"x"}'
    assert data[:-4] == MAGIC + struct.pack("<II", 1, len(meta)) + meta + struct.pack("<I", 0)
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])
    assert load_checkpoint(tmp_path / "e.ckpt").tensors == {}


def test_byte_layout_of_one_tensor():
    arr = np.array([[1.0, 2.0]], dtype=np.float32)
    data = encode_checkpoint({"w": arr}, {})
    table = data[8 + 4 + 2:-4]
    assert table == struct.pack("<IH", 1, 1) + b"w" + struct.pack("<BBII", 0, 2, 1, 2) + arr.tobytes()


def test_every_single_byte_corruption_detected():
    data = encode_checkpoint(mixed_tensors(), {"epoch": 1})
    for pos in range(len(data)):
        for delta in (1, 0x80, 0xFF):
            bad = bytearray(data)
            bad[pos] ^= delta
            with pytest.raises(CheckpointError):
                decode_checkpoint(bytes(bad))


def test_corruption_of_model_checkpoint_sampled():
    data = encode_checkpoint(flatten_models(CycleGAN(**TOY).models()), {})
    rng = np.random.default_rng(0)
    for pos in rng.integers(0, len(data), 300):
        bad = bytearray(data)
        bad[pos] ^= int(rng.integers(1, 256))
        with pytest.raises(CheckpointError):
            decode_checkpoint(bytes(bad))


def test_corruption_reports_crc_mismatch_in_payload():
    data = bytearray(encode_checkpoint(mixed_tensors(), {}))
    data[data.index(b"a.w") + 3 + 2 + 8 + 5] ^= 1
    with pytest.raises(CrcMismatch):
        decode_checkpoint(bytes(data))


def test_truncation_at_every_offset():
    tensors = mixed_tensors()
    data = encode_checkpoint(tensors, {"epoch": 1})
    for cut in range(len(data)):
        with pytest.raises(CheckpointError):
            decode_checkpoint(data[:cut])
    # cutting inside a payload names the tensor
    offset = data.index(b"a.b") + 3 + 2 + 4 + 8
    with pytest.raises(TruncatedFile, match="'a.b'"):
        decode_checkpoint(data[:offset])


def test_header_errors(tmp_path):
    data = encode_checkpoint({}, {})
    with pytest.raises(BadMagic):
        decode_checkpoint(b"PK\x03\x04" + data[4:])
    with pytest.raises(VersionUnsupported):
        decode_checkpoint(MAGIC + struct.pack("<I", 2) + data[8:])
    with pytest.raises(IoFailure):
        load_checkpoint(tmp_path / "missing.ckpt")
    with pytest.raises(IoFailure):
        save_checkpoint({}, {}, tmp_path / "no" / "dir" / "x.ckpt")
    assert issubclass(CheckpointError, DataError)


def test_group_strips_prefix():
    ck = decode_checkpoint(encode_checkpoint({"G.a": np.zeros(1), "G.b": np.ones(2), "D.a": np.zeros(3)}, {}))
    assert set(ck.group("G")) == {"a", "b"}


def test_format_table_lists_tensors():
    ck = decode_checkpoint(encode_checkpoint(mixed_tensors(), {"epoch": 1}))
    text = format_table(ck)
    assert "a.w" in text and "3x4" in text and "total elements" in text


# ----------------------------------------------------------------- transfer

def _names(model):
    return [f"{p}.{n}" for p, m in model.models().items() for n, _ in m.named_parameters()]


def test_snapshot_donor_transfers_everything():
    donor = CycleGAN(**TOY, seed=1)
    target = CycleGAN(**TOY, seed=2)
    report = transfer_init(target.models(), flatten_models(donor.models()))
    assert report.transferred == _names(target)
    assert report.skipped_shape_mismatch == [] and report.missing_in_donor == []
    for (_, a), (_, b) in zip(flatten_models(donor.models()).items(), flatten_models(target.models()).items()):
        assert np.array_equal(a, b)


def test_missing_layer_permissive_and_strict():
    donor = flatten_models(CycleGAN(**TOY, seed=1).models())
    gone = "G_XY.out.weight" if "G_XY.out.weight" in donor else next(iter(donor))
    del donor[gone]
    target = CycleGAN(**TOY, seed=2)
    before = target.models()["G_XY"].state_dict()
    report = transfer_init(target.models(), donor)
    assert report.missing_in_donor == [gone]
    assert len(report.transferred) == len(_names(target)) - 1
    key = gone.split(".", 1)[1]
    assert np.array_equal(target.models()["G_XY"].state_dict()[key], before[key])
    with pytest.raises(MissingTensor):
        transfer_init(CycleGAN(**TOY).models(), donor, policy="strict")


def test_shape_mismatch_permissive_and_strict():
    donor = flatten_models(CycleGAN(gen_spec=GeneratorSpec(base=6, residual_blocks=1),
                                    disc_spec=DiscriminatorSpec(base=2)).models())
    target = CycleGAN(**TOY)
    report = transfer_init(target.models(), donor)
    assert report.skipped_shape_mismatch and all(n.startswith("G_") for n in report.skipped_shape_mismatch)
    assert any(n.startswith("D_") for n in report.transferred)
    with pytest.raises(ShapeMismatch):
        transfer_init(target.models(), donor, policy="strict")
    with pytest.raises(ValueError):
        transfer_init(target.models(), donor, policy="lenient")


def test_generators_only():
    donor = flatten_models(CycleGAN(**TOY, seed=1).models())
    target = CycleGAN(**TOY, seed=2)
    report = transfer_init(target.models(), donor, only=("G_XY", "G_YX"))
    assert all(n.startswith("G_") for n in report.transferred)
    assert all(n.startswith("D_") for n in report.missing_in_donor)


def test_transfer_is_idempotent():
    donor = Checkpoint({}, flatten_models(CycleGAN(**TOY, seed=1).models()))
    target = CycleGAN(**TOY, seed=2)
    transfer_init(target.models(), donor)
    once = {k: v.copy() for k, v in flatten_models(target.models()).items()}
    transfer_init(target.models(), donor)
    for k, v in flatten_models(target.models()).items():
        assert v.tobytes() == once[k].tobytes()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(["drop", "reshape", "keep"]), min_size=8, max_size=8), st.integers(0, 2 ** 16))
def test_report_partitions_target(actions, seed):
    rng = np.random.default_rng(seed)
    target = {"a": GatedConv1d(3, 4, 3, rng=rng), "b": GatedConv1d(4, 2, 5, rng=rng)}
    names = [f"{p}.{n}" for p, m in target.items() for n, _ in m.named_parameters()]
    donor = {}
    for i, name in enumerate(names):
        act = actions[i % len(actions)]
        shape = target[name.split(".")[0]].state_dict()[name.split(".", 1)[1]].shape
        if act == "keep":
            donor[name] = rng.standard_normal(shape)
        elif act == "reshape":
            donor[name] = rng.standard_normal(tuple(s + 1 for s in shape) or (2,))
    report = transfer_init(target, donor)
    parts = report.transferred + report.skipped_shape_mismatch + report.missing_in_donor
    assert sorted(parts) == sorted(names) and len(parts) == len(set(parts))


def test_partition_fuzz_1000_cases():
    rng = np.random.default_rng(11)
    target = {"a": GatedConv1d(2, 3, 3, rng=rng), "b": GatedConv1d(3, 2, 3, rng=rng)}
    full = flatten_models(target)
    names = list(full)
    for _ in range(1000):
        donor = {}
        for name in names:
            r = rng.integers(0, 3)
            if r == 1:
                donor[name] = full[name]
            elif r == 2:
                donor[name] = np.zeros(full[name].size + 1)
        extra = rng.integers(0, 2)
        if extra:
            donor["zzz.unused"] = np.zeros(2)
        report = transfer_init(target, donor)
        assert sorted(report.transferred + report.skipped_shape_mismatch + report.missing_in_donor) == sorted(names)
        assert set(report.transferred) == {n for n in names if r_is(donor, full, n)}


def r_is(donor, full, name):
    return name in donor and donor[name].shape == full[name].shape
