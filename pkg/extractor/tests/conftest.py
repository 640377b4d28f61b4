import numpy as np
import pytest
from PIL import Image

from radkit_extractor.backbones import load_backbone
from radkit_extractor.extract import ExtractorConfig


def write_image(path, rng, size=(64, 56), mode="RGB"):
    path.parent.mkdir(parents=True, exist_ok=True)
    if mode == "L":
        arr = rng.integers(0, 255, size=(size[1], size[0]), dtype=np.uint8)
    else:
        arr = rng.integers(0, 255, size=(size[1], size[0], 3), dtype=np.uint8)
    Image.fromarray(arr, mode=mode).save(path)
    return path


@pytest.fixture(scope="session")
def mvtec_tree(tmp_path_factory):
    """Two-category MVTec-style image tree with ground-truth masks."""
    rng = np.random.default_rng(0)
    root = tmp_path_factory.mktemp("images")
    for category in ("widget", "gadget"):
        for i in range(3):
            write_image(root / category / "train" / "good" / f"{i:03d}.png", rng)
        for i in range(2):
            write_image(root / category / "test" / "good" / f"{i:03d}.png", rng)
        for i in range(2):
            write_image(root / category / "test" / "scratch" / f"{i:03d}.png", rng)
            mask = np.zeros((56, 64), dtype=np.uint8)
            mask[10:30, 20:40] = 255
            mask_path = root / category / "ground_truth" / "scratch" / f"{i:03d}_mask.png"
            mask_path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(mask, mode="L").save(mask_path)
    # one grayscale training image to exercise channel replication
    write_image(root / "widget" / "train" / "good" / "gray.png", rng, mode="L")
    return root


@pytest.fixture(scope="session")
def tiny_backbone():
    return load_backbone("tiny_vit_p16", device="cpu")


@pytest.fixture()
def tiny_config():
    return ExtractorConfig(
        backbone="tiny_vit_p16", layers=(2, 4), resize=36, crop=32, batch_size=4
    )
