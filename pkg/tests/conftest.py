import numpy as np
import pytest
from PIL import Image

from segmerge import fixture_path
from segmerge.raster import canonical_color
from segmerge.taxonomy import (
    merge_label_spaces,
    parse_directives,
    parse_taxonomy,
)

FIXTURES = ("cityscapes.txt", "suim.txt", "sun_rgbd.txt")


@pytest.fixture(scope="session")
def cityscapes_tax():
    return parse_taxonomy(fixture_path("cityscapes.txt").read_text())


@pytest.fixture(scope="session")
def suim_tax():
    return parse_taxonomy(fixture_path("suim.txt").read_text())


@pytest.fixture(scope="session")
def sun_tax():
    return parse_taxonomy(fixture_path("sun_rgbd.txt").read_text())


@pytest.fixture(scope="session")
def all_tax(cityscapes_tax, suim_tax, sun_tax):
    return [cityscapes_tax, suim_tax, sun_tax]


@pytest.fixture(scope="session")
def directives(all_tax):
    return parse_directives(fixture_path("merge_directives.txt").read_text(), all_tax)


@pytest.fixture(scope="session")
def merged(all_tax, directives):
    """(space, class_map) for the full three-dataset merge, K = 63."""
    return merge_label_spaces(all_tax, directives)


@pytest.fixture(scope="session")
def space63(merged):
    return merged[0]


@pytest.fixture(scope="session")
def classmap63(merged):
    return merged[1]


def write_indexed_png(path, ids):
    Image.fromarray(np.asarray(ids, dtype=np.uint8), mode="L").save(path, format="PNG")


def write_color_png(path, ids):
    ids = np.asarray(ids)
    rgb = np.zeros(ids.shape + (3,), dtype=np.uint8)
    for c in range(8):
        rgb[ids == c] = canonical_color(c)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")


def make_dataset_dir(root, dataset_id, annotations, encoding="indexed", image_dims=None):
    """Lay out <root>/<id>/{images,labels}/<stem>.png pairs for a dict of
    stem -> id array. Returns the dataset root."""
    base = root / dataset_id
    (base / "images").mkdir(parents=True, exist_ok=True)
    (base / "labels").mkdir(parents=True, exist_ok=True)
    for stem, ids in annotations.items():
        ids = np.asarray(ids, dtype=np.uint8)
        h, w = image_dims.get(stem, ids.shape) if image_dims else ids.shape
        Image.fromarray(np.zeros((h, w, 3), dtype=np.uint8)).save(
            base / "images" / f"{stem}.png"
        )
        if encoding == "color-coded":
            write_color_png(base / "labels" / f"{stem}.png", ids)
        else:
            write_indexed_png(base / "labels" / f"{stem}.png", ids)
    return base
