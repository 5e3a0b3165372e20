"""Image-folder scanning with class subdirectories.

Sample order is the lexicographic order of relative paths, so every domain
export of the same folder sees the samples in the same order, and reruns are
deterministic. Unreadable files are skipped and recorded.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

from PIL import Image

from .formats import ExportError

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".webp"}


@dataclass
class FolderIndex:
    root: str
    classes: list  # sorted class names
    paths: list  # relative paths, lexicographic
    labels: list  # int per path


def scan_folder(root) -> FolderIndex:
    root = str(root)
    classes = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not classes:
        raise ExportError(f"{root}: no class subdirectories found")
    paths, labels = [], []
    for ci, cls in enumerate(classes):
        names = sorted(os.listdir(os.path.join(root, cls)))
        for name in names:
            if os.path.splitext(name)[1].lower() not in IMAGE_EXTENSIONS:
                continue
            paths.append(f"{cls}/{name}")
            labels.append(ci)
    if not paths:
        raise ExportError(f"{root}: no images found")
    order = sorted(range(len(paths)), key=lambda i: paths[i])
    return FolderIndex(
        root, classes,
        [paths[i] for i in order],
        [labels[i] for i in order],
    )


def load_images(index: FolderIndex, transform):
    """Yields (relative path, label, tensor); unreadable images are skipped
    and reported through the returned skip list (filled as iteration runs)."""
    skipped = []

    def generate():
        for path, label in zip(index.paths, index.labels):
            full = os.path.join(index.root, path)
            try:
                with Image.open(full) as img:
                    tensor = transform(img.convert("RGB"))
            except OSError:
                skipped.append(path)
                continue
            yield path, label, tensor

    return generate(), skipped
