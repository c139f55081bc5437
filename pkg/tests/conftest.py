import sys
from pathlib import Path

import cv2
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

CLASS_NAMES = ("MA", "EX", "SE", "HE")

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def disk_mask(size, cy, cx, radius):
    yy, xx = np.mgrid[0:size, 0:size]
    return (((yy - cy) ** 2 + (xx - cx) ** 2) <= radius ** 2).astype(np.uint8)


def write_rgb(path, rgb):
    path.parent.mkdir(parents=True, exist_ok=True)
    ok = cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR))
    assert ok, f"failed to write {path}"


def write_mask(path, binary):
    path.parent.mkdir(parents=True, exist_ok=True)
    ok = cv2.imwrite(str(path), (binary > 0).astype(np.uint8) * 255)
    assert ok, f"failed to write {path}"


def build_tree(root, layout, size=64, seed=0):
    """Materialize a split/image + split/label/<CLS> tree on disk.

    layout: {split: [(sample_id, {cls: "blob" | "empty"}), ...]}. A class
    missing from the dict gets no mask file at all. Returns per-class counts
    of images with at least one foreground pixel.
    """
    rng = np.random.default_rng(seed)
    presence = {name: 0 for name in CLASS_NAMES}
    for split, items in layout.items():
        for sample_id, classes in items:
            rgb = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
            write_rgb(Path(root) / split / "image" / f"{sample_id}.png", rgb)
            for cls_name, kind in classes.items():
                mask_path = Path(root) / split / "label" / cls_name / f"{sample_id}.png"
                if kind == "blob":
                    cy = int(rng.integers(size // 4, 3 * size // 4))
                    cx = int(rng.integers(size // 4, 3 * size // 4))
                    mask = disk_mask(size, cy, cx, max(3, size // 8))
                    presence[cls_name] += 1
                elif kind == "empty":
                    mask = np.zeros((size, size), np.uint8)
                else:
                    raise ValueError(kind)
                write_mask(mask_path, mask)
    return presence


SMALL_LAYOUT = {
    "train": [
        ("t1", {"MA": "blob", "EX": "blob"}),
        ("t2", {"SE": "blob"}),
        ("t3", {"HE": "blob", "MA": "empty"}),
        ("t4", {}),
    ],
    "val": [
        ("v1", {"EX": "blob"}),
        ("v2", {"MA": "blob", "HE": "blob"}),
    ],
    "test": [
        ("s1", {"EX": "blob", "SE": "blob"}),
        ("s2", {"HE": "blob"}),
    ],
}


@pytest.fixture
def tree_factory(tmp_path):
    def make(layout, size=64, seed=0, name="data"):
        root = tmp_path / name
        presence = build_tree(root, layout, size=size, seed=seed)
        return root, presence

    return make


@pytest.fixture
def small_tree(tree_factory):
    return tree_factory(SMALL_LAYOUT)
