import numpy as np
import pytest

from radkit.feature_io import FeaturePack, LayerGrid
from radkit.memory_bank import build_bank
from radkit.synthetic import SynthSpec, generate_synthetic_dataset


def unit_rows(rng, n, dim):
    v = rng.standard_normal((n, dim))
    return (v / np.linalg.norm(v, axis=1, keepdims=True)).astype(np.float32)


def make_pack(
    rng,
    image_id="img0",
    category="cat00",
    split="train",
    label="normal",
    grid=(2, 2),
    layer_ids=(4, 7),
    dim=8,
    global_dim=8,
    resolution=(32, 32),
):
    h, w = grid
    layers = [
        LayerGrid(layer_id=lid, data=unit_rows(rng, h * w, dim).reshape(h, w, dim))
        for lid in layer_ids
    ]
    return FeaturePack(
        image_id=image_id,
        category=category,
        split=split,
        label=label,
        global_descriptor=unit_rows(rng, 1, global_dim)[0],
        layers=layers,
        source_resolution=resolution,
    )


def make_packs(rng, count, prefix="img", **kwargs):
    return [make_pack(rng, image_id=f"{prefix}{i:03d}", **kwargs) for i in range(count)]


@pytest.fixture(scope="session")
def small_synth():
    """A compact but fully featured dataset reused by retrieval/metric tests."""
    spec = SynthSpec(
        categories=2,
        train_per_category=8,
        test_per_category=6,
        grid=(6, 6),
        layer_dims={4: 16, 7: 16},
        global_dim=16,
        anomaly_fraction=0.5,
        anomaly_patches=4,
        margin=0.8,
        jitter=0.1,
        source_resolution=(48, 48),
    )
    train, test, masks = generate_synthetic_dataset(spec, seed=123)
    return spec, train, test, masks


@pytest.fixture(scope="session")
def small_bank(small_synth):
    _spec, train, _test, _masks = small_synth
    return build_bank(train, [4, 7])
