"""Decoding, remapping and encoding of annotation rasters.

All three steps are pure functions: dataset-native pixels go in, an id
raster tagged with its label-space comes out, and a LUT turns a local
raster into a universal one. Universal annotations persist as 8-bit
grayscale PNGs with ignore pixels at 255.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import SegmergeError
from .taxonomy import IGNORE_ID, POISON, UNIVERSAL, DatasetTaxonomy, Lut


@dataclass(frozen=True)
class AnnotationRaster:
    """Dense 2-D grid of class ids.

    ``space`` is the dataset id for rasters still in their native
    label-space and ``UNIVERSAL`` after remapping. The pixel array is
    frozen so rasters can be shared between workers.
    """

    ids: np.ndarray  # (height, width) uint8
    space: str

    def __post_init__(self):
        if self.ids.ndim != 2 or self.ids.dtype != np.uint8:
            raise SegmergeError("raster ids must be a 2-D uint8 array")
        if self.ids.size == 0:
            raise SegmergeError("raster must hold at least one pixel")
        self.ids.flags.writeable = False

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @property
    def height(self) -> int:
        return self.ids.shape[0]


def decode_indexed(
    pixels: np.ndarray,
    space: str,
    *,
    allow_16bit: bool = False,
    ignore_sentinel: int | None = None,
) -> AnnotationRaster:
    """Turn a single-channel label image into a raster.

    16-bit inputs are rejected unless ``allow_16bit`` is set; with the
    flag, values above 255 are still errors except for a declared
    ``ignore_sentinel``, which folds into 255.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise SegmergeError(
            f"expected single-channel label map, got {pixels.ndim}-dimensional input"
        )
    if pixels.dtype == np.uint8:
        return AnnotationRaster(ids=pixels.copy(), space=space)
    if pixels.dtype == np.uint16 or pixels.dtype == np.int32:
        if not allow_16bit:
            raise SegmergeError(
                "16-bit label map rejected; pass the narrowing flag to accept it"
            )
        wide = pixels.astype(np.int64)
        if ignore_sentinel is not None:
            wide = np.where(wide == ignore_sentinel, IGNORE_ID, wide)
        bad = wide > 255
        if bad.any():
            y, x = np.argwhere(bad)[0]
            raise SegmergeError(
                f"16-bit value {int(wide[y, x])} at (x={x}, y={y}) does not fit 8 bits"
            )
        if (wide < 0).any():
            raise SegmergeError("negative label value in 16-bit input")
        return AnnotationRaster(ids=wide.astype(np.uint8), space=space)
    raise SegmergeError(f"unsupported label bit depth {pixels.dtype}")


def decode_color_coded(
    pixels: np.ndarray, space: str, *, strict: bool = True
) -> AnnotationRaster:
    """Decode binary RGB color codes, R-major: id = 4*R + 2*G + B with a
    channel counting as set at 128 and above. Strict mode requires every
    channel to sit in {0..31} or {224..255}."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise SegmergeError("expected a 3-channel color-coded image")
    if pixels.dtype != np.uint8:
        raise SegmergeError(f"unsupported color bit depth {pixels.dtype}")
    if strict:
        off_range = (pixels > 31) & (pixels < 224)
        if off_range.any():
            y, x, _ = np.argwhere(off_range)[0]
            r, g, b = (int(v) for v in pixels[y, x])
            raise SegmergeError(
                f"channel value outside binary color range at (x={x}, y={y}): "
                f"({r}, {g}, {b})"
            )
    bits = (pixels >= 128).astype(np.uint8)
    ids = bits[:, :, 0] * 4 + bits[:, :, 1] * 2 + bits[:, :, 2]
    return AnnotationRaster(ids=ids, space=space)


def canonical_color(class_id: int) -> tuple[int, int, int]:
    """The pure binary color encoding a color-coded class id 0..7."""
    if not 0 <= class_id <= 7:
        raise SegmergeError(f"color-coded ids span 0..7, got {class_id}")
    return (255 * (class_id >> 2 & 1), 255 * (class_id >> 1 & 1), 255 * (class_id & 1))


def remap(raster: AnnotationRaster, lut: Lut) -> AnnotationRaster:
    """Apply a compiled class mapping pixelwise, producing a universal raster."""
    if raster.space != lut.dataset_id:
        raise SegmergeError(
            f"raster is in space {raster.space!r} but the LUT was built for "
            f"{lut.dataset_id!r}"
        )
    mapped = lut.table[raster.ids]
    if lut.strict:
        poisoned = mapped == POISON
        if poisoned.any():
            y, x = np.argwhere(poisoned)[0]
            raise SegmergeError(
                f"undeclared id {int(raster.ids[y, x])} at (x={x}, y={y}) "
                f"for dataset {lut.dataset_id!r}"
            )
    return AnnotationRaster(ids=mapped.astype(np.uint8), space=UNIVERSAL)


def encode_universal(raster: AnnotationRaster, k: int) -> np.ndarray:
    """Validate a universal raster against the label-space size and return
    the single-channel 8-bit pixel grid. Round trips bit-exactly through
    decode_indexed."""
    if raster.space != UNIVERSAL:
        raise SegmergeError(f"raster is in space {raster.space!r}, not universal")
    bad = (raster.ids >= k) & (raster.ids != IGNORE_ID)
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise SegmergeError(
            f"id {int(raster.ids[y, x])} at (x={x}, y={y}) is outside the "
            f"{k}-class universal label-space"
        )
    return raster.ids.copy()


def read_image(path: str | Path) -> np.ndarray:
    """Load an annotation image (PNG or BMP) as a numpy array: (h, w) for
    single-channel inputs, (h, w, 3) for RGB."""
    with Image.open(path) as img:
        if img.mode in ("L", "I;16", "I"):
            return np.asarray(img)
        if img.mode == "P":
            return np.asarray(img.convert("P"), dtype=np.uint8)
        if img.mode in ("RGB", "RGBA"):
            return np.asarray(img.convert("RGB"))
        raise SegmergeError(f"unsupported image mode {img.mode!r} in {path}")


def image_size(path: str | Path) -> tuple[int, int]:
    """(width, height) from the image header without decoding pixel data."""
    with Image.open(path) as img:
        return img.size


def load_annotation(
    path: str | Path,
    taxonomy: DatasetTaxonomy,
    *,
    strict: bool = True,
    allow_16bit: bool = False,
    ignore_sentinel: int | None = None,
) -> AnnotationRaster:
    """Read and decode one dataset-native annotation file."""
    pixels = read_image(path)
    if taxonomy.encoding == "color-coded":
        return decode_color_coded(pixels, taxonomy.dataset_id, strict=strict)
    return decode_indexed(
        pixels,
        taxonomy.dataset_id,
        allow_16bit=allow_16bit,
        ignore_sentinel=ignore_sentinel,
    )


def load_universal(path: str | Path) -> AnnotationRaster:
    return decode_indexed(read_image(path), UNIVERSAL)


def write_universal_png(path: str | Path, raster: AnnotationRaster, k: int) -> None:
    """Persist a universal raster as 8-bit grayscale PNG, no alpha."""
    pixels = encode_universal(raster, k)
    Image.fromarray(pixels, mode="L").save(path, format="PNG")
