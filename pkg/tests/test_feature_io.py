import hashlib
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radkit.errors import (
    BadMagicError,
    TruncatedTensorError,
    ValidationError,
    VersionMismatchError,
)
from radkit.feature_io import (
    FeaturePack,
    LayerGrid,
    l2_normalize_rows,
    packs_equal,
    read_feature_pack,
    validate_pack,
    write_feature_pack,
)

from conftest import make_pack, unit_rows


def roundtrip(pack):
    buf = io.BytesIO()
    write_feature_pack(pack, buf)
    buf.seek(0)
    return read_feature_pack(buf)


def test_valid_pack_has_no_violations():
    pack = make_pack(np.random.default_rng(0))
    assert validate_pack(pack) == []


def test_zero_layers_rejected():
    pack = make_pack(np.random.default_rng(0))
    pack.layers = []
    with pytest.raises(ValidationError, match="layers must be non-empty"):
        write_feature_pack(pack, io.BytesIO())


def test_scaled_patch_reported_with_position():
    pack = make_pack(np.random.default_rng(0))
    pack.layers[1].data[1, 0] *= 2.0
    violations = validate_pack(pack)
    assert len(violations) == 1
    assert "layers[1]" in violations[0] and "[1,0]" in violations[0]


def test_mismatched_grid_reported():
    rng = np.random.default_rng(0)
    pack = make_pack(rng)
    pack.layers[1] = LayerGrid(
        layer_id=7, data=unit_rows(rng, 6, 8).reshape(3, 2, 8)
    )
    assert any("grid" in v for v in validate_pack(pack))


def test_non_increasing_layer_ids_reported():
    pack = make_pack(np.random.default_rng(0), layer_ids=(4, 7))
    pack.layers = pack.layers[::-1]
    assert any("strictly increasing" in v for v in validate_pack(pack))


def test_global_norm_violation_reported():
    pack = make_pack(np.random.default_rng(0))
    pack.global_descriptor = pack.global_descriptor * np.float32(1.01)
    assert any(v.startswith("global_descriptor") for v in validate_pack(pack))


def test_roundtrip_bit_exact():
    pack = make_pack(np.random.default_rng(1))
    assert packs_equal(pack, roundtrip(pack))


def test_writes_are_byte_identical():
    pack = make_pack(np.random.default_rng(2))
    a, b = io.BytesIO(), io.BytesIO()
    write_feature_pack(pack, a)
    write_feature_pack(pack, b)
    assert hashlib.sha256(a.getvalue()).hexdigest() == hashlib.sha256(
        b.getvalue()
    ).hexdigest()


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    grid=st.tuples(st.integers(1, 3), st.integers(1, 3)),
    dim=st.integers(4, 12),
    n_layers=st.integers(1, 3),
)
def test_roundtrip_property(seed, grid, dim, n_layers):
    rng = np.random.default_rng(seed)
    pack = make_pack(
        rng,
        grid=grid,
        layer_ids=tuple(range(1, n_layers + 1)),
        dim=dim,
        split="test",
        label="anomalous",
    )
    pack.mask_ref = "masks/img0"
    assert packs_equal(pack, roundtrip(pack))


def test_bad_magic():
    with pytest.raises(BadMagicError, match="bad magic"):
        read_feature_pack(io.BytesIO(b"XXXX" + b"\x00" * 64))


def test_truncated_tensor_named():
    pack = make_pack(np.random.default_rng(3))
    buf = io.BytesIO()
    write_feature_pack(pack, buf)
    clipped = io.BytesIO(buf.getvalue()[:-40])
    with pytest.raises(TruncatedTensorError, match="layer_7"):
        read_feature_pack(clipped)


def test_version_mismatch():
    pack = make_pack(np.random.default_rng(4))
    buf = io.BytesIO()
    write_feature_pack(pack, buf)
    raw = bytearray(buf.getvalue())
    raw[4:6] = (99).to_bytes(2, "little")
    with pytest.raises(VersionMismatchError):
        read_feature_pack(io.BytesIO(bytes(raw)))


def test_drifted_pack_roundtrips_unchanged():
    # norms inside the 1e-3 tolerance are accepted and preserved bit-exactly
    pack = make_pack(np.random.default_rng(5))
    pack.layers[0].data *= np.float32(1.0005)
    assert validate_pack(pack) == []
    assert packs_equal(pack, roundtrip(pack))


def test_normalize_rows_is_idempotent():
    rng = np.random.default_rng(6)
    raw = (rng.standard_normal((50, 16)) * 1.0005).astype(np.float32)
    raw /= np.linalg.norm(raw.astype(np.float64), axis=1, keepdims=True).astype(
        np.float32
    ) * np.float32(1.0004)
    once = l2_normalize_rows(raw)
    twice = l2_normalize_rows(once)
    assert once.tobytes() == twice.tobytes()
    assert np.all(np.abs(np.linalg.norm(once.astype(np.float64), axis=1) - 1) < 1e-6)
