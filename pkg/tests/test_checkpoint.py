import json

import numpy as np
import pytest

from statetune.checkpoint import (load_checkpoint, restore_weights, save_checkpoint,
                                  verify_fixed_tensors, weights_meta)
from statetune.errors import DigestError, FormatError
from statetune.kernel import KernelConfig, KernelLift


def test_round_trip_float32(tmp_path, weights, rng):
    S0 = rng.standard_normal((4, 8, 8))
    R = rng.standard_normal((32, 32))
    path = tmp_path / "c.stck"
    manifest = save_checkpoint(path, {"state.S0": S0, "dbp.R": R}, weights_meta(weights))
    tensors, back = load_checkpoint(path)
    assert back == json.loads(json.dumps(manifest))
    np.testing.assert_array_equal(tensors["state.S0"], S0.astype("<f4").astype(np.float64))
    assert tensors["dbp.R"].dtype == np.float64
    raw = path.read_bytes()
    header, _, data = raw.partition(b"\n")
    entry = {e["name"]: e for e in json.loads(header)["tensors"]}["dbp.R"]
    blob = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
    np.testing.assert_array_equal(np.frombuffer(blob, "<f4").reshape(32, 32), R.astype("<f4"))


def test_weights_regenerate_from_manifest(tmp_path, weights):
    path = tmp_path / "c.stck"
    save_checkpoint(path, {"state.S0": np.zeros((4, 8, 8))}, weights_meta(weights))
    _, manifest = load_checkpoint(path)
    assert restore_weights(manifest).digest == weights.digest
    manifest["weights"]["digest"] = "0" * 64
    with pytest.raises(DigestError):
        restore_weights(manifest)
    with pytest.raises(FormatError):
        restore_weights({})


def test_corrupted_tensor_detected(tmp_path):
    path = tmp_path / "c.stck"
    save_checkpoint(path, {"state.S0": np.ones((2, 3, 3))})
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(DigestError):
        load_checkpoint(path)
    path.write_bytes(bytes(raw[:-4]))
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(path)


def test_malformed_files(tmp_path):
    path = tmp_path / "c.stck"
    path.write_bytes(b"no newline here")
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(b'{"format": "other"}\n')
    with pytest.raises(FormatError):
        load_checkpoint(path)
    with pytest.raises(FormatError):
        save_checkpoint(path, {"x": np.array([np.inf])})


def test_fixed_tensor_verification(tmp_path, weights):
    lift = KernelLift.build(KernelConfig(M=16, gamma=0.5), weights)
    path = tmp_path / "c.stck"
    save_checkpoint(path, {"kernel.supports": lift.supports.vectors, "kernel.q": lift.Q})
    tensors, _ = load_checkpoint(path)
    verify_fixed_tensors(tensors, lift)
    other = KernelLift.build(KernelConfig(M=16, gamma=0.5, seed=1), weights)
    with pytest.raises(DigestError):
        verify_fixed_tensors(tensors, other)
