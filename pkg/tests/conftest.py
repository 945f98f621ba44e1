import numpy as np
import pytest
from PIL import Image

from vlmpolyp.dataset import MANIFEST_HEADER


def write_manifest(directory, classes, size=(40, 30), seed=0):
    """Write one random PNG per class code plus a manifest CSV; returns the CSV path."""
    rng = np.random.default_rng(seed)
    img_dir = directory / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    lines = [",".join(MANIFEST_HEADER)]
    for i, code in enumerate(classes):
        arr = rng.integers(0, 256, (size[1], size[0], 3), dtype=np.uint8)
        name = f"{code}_img_{i:03d}.png"
        Image.fromarray(arr).save(img_dir / name)
        lines.append(f"img{i:03d},images/{name},{int(code != 'Normal')},{code}")
    path = directory / "manifest.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def manifest_factory(tmp_path):
    def make(classes, **kw):
        return write_manifest(tmp_path, classes, **kw)
    return make
