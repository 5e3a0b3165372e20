import numpy as np
import pytest
from PIL import Image


@pytest.fixture(scope="session")
def image_root(tmp_path_factory):
    """Ten small images in two class subdirectories, plus one unreadable file."""
    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(0)
    for cls, count in (("cat", 5), ("dog", 5)):
        d = root / cls
        d.mkdir()
        for i in range(count):
            arr = rng.integers(0, 255, size=(48, 48, 3), dtype=np.uint8)
            Image.fromarray(arr).save(d / f"img_{i:02d}.png")
    (root / "cat" / "broken.png").write_bytes(b"not an image at all")
    return root
