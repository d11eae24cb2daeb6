import struct

import pytest
import torch

from almlab.adaptation import FreezeConfig, LoraConfig, lora_modules
from almlab.checkpoint import FORMAT_VERSION, MAGIC, inspect, load_checkpoint, read_records, save_checkpoint, write_records
from almlab.errors import CheckpointError
from almlab.model import build_bundle
from almlab.training import TrainConfig, train


@pytest.fixture
def saved(tmp_path):
    b = build_bundle(seed=4, lora=LoraConfig(), freeze=FreezeConfig(train_encoder=False))
    with torch.no_grad():
        for m in lora_modules(b):
            m.lora_B.normal_()
    path = tmp_path / "ckpt.bin"
    rng = torch.get_rng_state()
    save_checkpoint(b, path, step=17, rng_state=rng, meta={"note": "x"})
    return b, path, rng


def test_roundtrip_bit_exact(saved):
    b, path, rng = saved
    ck = load_checkpoint(path)
    ref = b.state_dict()
    got = ck.bundle.state_dict()
    assert ref.keys() == got.keys()
    for k in ref:
        assert ref[k].dtype == got[k].dtype
        assert torch.equal(ref[k], got[k]), k
    assert ck.step == 17
    assert torch.equal(ck.rng_state, rng)
    assert ck.config["meta"] == {"note": "x"}
    assert ck.bundle.freeze_config == FreezeConfig(train_encoder=False)
    assert [n for n, p in ck.bundle.named_parameters() if p.requires_grad] == [
        n for n, p in b.named_parameters() if p.requires_grad
    ]


def test_save_is_deterministic(saved, tmp_path):
    b, path, rng = saved
    again = tmp_path / "again.bin"
    save_checkpoint(b, again, step=17, rng_state=rng, meta={"note": "x"})
    assert again.read_bytes() == path.read_bytes()


def test_optimizer_state_roundtrip(tiny_samples, tmp_path):
    b = build_bundle(seed=0, lora=LoraConfig(), freeze=FreezeConfig())
    res = train(TrainConfig(max_steps=2, batch_size=2, audio_max_seconds=0.5), tiny_samples, b)
    path = tmp_path / "c.bin"
    save_checkpoint(b, path, res.step, res.optimizer)
    ck = load_checkpoint(path)
    state = res.optimizer.state_dict()["state"]
    for idx, st in state.items():
        for key, val in st.items():
            assert torch.equal(ck.optimizer_state[f"optim/{idx}/{key}"], torch.as_tensor(val))


def test_header_layout(saved):
    _, path, _ = saved
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    assert struct.unpack("<I", raw[8:12])[0] == FORMAT_VERSION


def test_version_mismatch(saved):
    _, path, _ = saved
    raw = bytearray(path.read_bytes())
    raw[8:12] = struct.pack("<I", FORMAT_VERSION + 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


@pytest.mark.parametrize("cut", [4, 20, -3])
def test_truncation(saved, cut):
    _, path, _ = saved
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(CheckpointError):
        read_records(path)


def test_trailing_bytes_and_magic(saved, tmp_path):
    _, path, _ = saved
    raw = path.read_bytes()
    path.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_records(path)
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        read_records(bad)
    with pytest.raises(CheckpointError):
        read_records(tmp_path / "missing.bin")


def test_shape_mismatch_is_checkpoint_error(tmp_path):
    b = build_bundle(seed=0)
    path = tmp_path / "c.bin"
    config = {"bundle": b.cfg.to_dict(), "lora": None, "freeze": None, "step": 0, "meta": {}}
    tensors = {f"model/{k}": v for k, v in b.state_dict().items()}
    tensors["model/lm.embed"] = torch.zeros(3, 3)
    write_records(path, config, tensors)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_dtypes_roundtrip(tmp_path):
    path = tmp_path / "r.bin"
    tensors = {
        "f32": torch.randn(2, 3),
        "f64": torch.randn(4, dtype=torch.float64),
        "i64": torch.arange(5),
        "u8": torch.tensor([0, 255], dtype=torch.uint8),
        "b": torch.tensor([True, False]),
        "scalar": torch.tensor(1.5),
    }
    write_records(path, {"k": [1, 2]}, tensors)
    config, got = read_records(path)
    assert config == {"k": [1, 2]}
    for k, v in tensors.items():
        assert got[k].dtype == v.dtype and torch.equal(got[k], v)


def test_inspect(saved):
    b, path, _ = saved
    info = inspect(path)
    assert info["format_version"] == FORMAT_VERSION
    assert info["n_parameters"] == sum(v.numel() for v in b.state_dict().values())
    assert info["tensors"]["model/lm.embed"]["shape"] == list(b.lm.embed.shape)
    assert "rng/torch" in info["tensors"]
