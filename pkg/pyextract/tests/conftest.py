import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))


def write_image(path: Path, rgb: tuple[int, int, int], size=(24, 18), noise_seed=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.tile(np.array(rgb, dtype=np.uint8), (size[1], size[0], 1))
    if noise_seed is not None:
        rng = np.random.default_rng(noise_seed)
        pixels = np.clip(
            pixels.astype(np.int16) + rng.integers(-20, 20, pixels.shape), 0, 255
        ).astype(np.uint8)
    Image.fromarray(pixels).save(path)


@pytest.fixture
def image_tree(tmp_path):
    """ID folder with three class subfolders plus one OOD folder."""
    id_root = tmp_path / "id_images"
    for i, (name, color) in enumerate([("c0", (200, 30, 30)), ("c1", (30, 200, 30)),
                                       ("c2", (30, 30, 200))]):
        for j in range(3):
            write_image(id_root / name / f"img{j}.png", color, noise_seed=i * 10 + j)
    ood_root = tmp_path / "weird"
    for j in range(3):
        write_image(ood_root / f"odd{j}.png", (128, 128, 128), noise_seed=100 + j)
    return tmp_path


def make_spec(tmp_path, output="store", **overrides):
    spec = {
        "model": "stub_model:build_model",
        "output": str(tmp_path / output),
        "batch_size": 4,
        "roots": [
            {"path": str(tmp_path / "id_images"), "source_tag": "ID",
             "split": "measure-train"},
            {"path": str(tmp_path / "weird"), "source_tag": "OOD:imagenet",
             "split": "ood-val"},
        ],
    }
    spec.update(overrides)
    return spec
