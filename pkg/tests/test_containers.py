import numpy as np
import pytest

from apdlab.containers import ContainerError, read_container, write_container


@pytest.fixture
def blob(tmp_path):
    path = tmp_path / "c.bin"
    tensors = [("w", np.arange(6, dtype=np.float32).reshape(2, 3)), ("b", np.array([1.5], dtype=np.float32))]
    write_container(path, {"kind": "test"}, tensors)
    return path


def test_round_trip(blob):
    header, t = read_container(blob)
    assert header["kind"] == "test"
    np.testing.assert_array_equal(t["w"], np.arange(6).reshape(2, 3))
    assert t["b"].dtype == np.float32


def test_truncated(blob):
    raw = blob.read_bytes()
    blob.write_bytes(raw[:-3])
    with pytest.raises(ContainerError, match="payload"):
        read_container(blob)


def test_bad_magic(blob):
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(ContainerError, match="magic"):
        read_container(blob)


def test_corrupted_payload(blob):
    raw = bytearray(blob.read_bytes())
    raw[-1] ^= 0x01
    blob.write_bytes(bytes(raw))
    with pytest.raises(ContainerError, match="checksum"):
        read_container(blob)
