"""Dataset scanning, pair validation, manifests and class histograms.

A manifest pairs every image with its annotation file and remembers the
split assignment. Rejection is soft: a bad pair moves to the rejected
list with a reason and processing continues.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import SegmergeError
from .raster import image_size, load_annotation, load_universal, remap
from .taxonomy import IGNORE_ID, ClassMap, DatasetTaxonomy, build_lut

SPLITS = ("train", "val", "unassigned")


@dataclass(frozen=True)
class Record:
    dataset_id: str
    image_path: str
    annotation_path: str
    width: int = 0
    height: int = 0
    split: str = "unassigned"

    @property
    def key(self) -> tuple[str, str]:
        return (self.dataset_id, self.image_path)


@dataclass(frozen=True)
class Manifest:
    records: tuple[Record, ...] = ()
    rejected: tuple[tuple[Record, str], ...] = ()

    def by_dataset(self) -> dict[str, list[Record]]:
        grouped: dict[str, list[Record]] = {}
        for r in self.records:
            grouped.setdefault(r.dataset_id, []).append(r)
        return grouped


@dataclass(frozen=True)
class PairingRule:
    """Relative path templates with a ``{stem}`` capture, e.g.
    ``images/{stem}.png`` paired with ``labels/{stem}.png``."""

    image_pattern: str
    annotation_pattern: str

    def __post_init__(self):
        for pattern in (self.image_pattern, self.annotation_pattern):
            if pattern.count("{stem}") != 1:
                raise SegmergeError(
                    f"pattern {pattern!r} needs exactly one {{stem}} capture"
                )


def _stem_from(pattern: str, rel_path: str) -> str | None:
    prefix, suffix = pattern.split("{stem}")
    if rel_path.startswith(prefix) and rel_path.endswith(suffix):
        stem = rel_path[len(prefix) : len(rel_path) - len(suffix)]
        if stem:
            return stem
    return None


def _glob_pattern(root: Path, pattern: str) -> list[str]:
    hits = root.glob(pattern.replace("{stem}", "*"))
    return sorted(str(p.relative_to(root)) for p in hits if p.is_file())


def scan_dataset(dataset_id: str, root: str | Path, rule: PairingRule) -> Manifest:
    """Pair images with annotations under one dataset root.

    Record order is lexicographic by image path. Files on one side of the
    rule without a partner are rejected with reason "unpaired". Image
    dimensions come from the headers; unreadable headers leave 0x0 for
    validate_pairs to deal with.
    """
    root = Path(root)
    if not root.is_dir():
        raise SegmergeError(f"dataset root is not a readable directory: {root}")

    images = _glob_pattern(root, rule.image_pattern)
    annotations = _glob_pattern(root, rule.annotation_pattern)
    annotation_stems = {
        stem
        for rel in annotations
        if (stem := _stem_from(rule.annotation_pattern, rel)) is not None
    }

    records: list[Record] = []
    rejected: list[tuple[Record, str]] = []
    image_stems = set()

    for rel in images:
        stem = _stem_from(rule.image_pattern, rel)
        if stem is None:
            continue
        image_stems.add(stem)
        annotation_rel = rule.annotation_pattern.replace("{stem}", stem)
        record = Record(
            dataset_id=dataset_id,
            image_path=str(root / rel),
            annotation_path=str(root / annotation_rel),
        )
        if stem not in annotation_stems:
            rejected.append((record, "unpaired"))
            continue
        try:
            width, height = image_size(root / rel)
        except OSError:
            width, height = 0, 0
        records.append(replace(record, width=width, height=height))

    for rel in annotations:
        stem = _stem_from(rule.annotation_pattern, rel)
        if stem is not None and stem not in image_stems:
            orphan = Record(
                dataset_id=dataset_id,
                image_path=str(root / rule.image_pattern.replace("{stem}", stem)),
                annotation_path=str(root / rel),
            )
            rejected.append((orphan, "unpaired"))

    return Manifest(records=tuple(records), rejected=tuple(rejected))


def validate_pairs(manifest: Manifest) -> Manifest:
    """Move records whose image and annotation dimensions differ to the
    rejected list ("size-mismatch"); undecodable files reject as
    "corrupt". Idempotent."""
    kept: list[Record] = []
    rejected = list(manifest.rejected)
    for record in manifest.records:
        try:
            image_dims = image_size(record.image_path)
            annotation_dims = image_size(record.annotation_path)
        except OSError:
            rejected.append((record, "corrupt"))
            continue
        if image_dims != annotation_dims:
            rejected.append((record, "size-mismatch"))
            continue
        kept.append(replace(record, width=image_dims[0], height=image_dims[1]))
    return Manifest(records=tuple(kept), rejected=tuple(rejected))


@dataclass(frozen=True)
class ClassHistogram:
    """Per-class pixel counts over the universal label-space."""

    counts: np.ndarray  # (k,) int64, evaluation classes only
    ignored: int = 0

    def __post_init__(self):
        self.counts.flags.writeable = False

    @property
    def k(self) -> int:
        return len(self.counts)

    @property
    def total_eval_pixels(self) -> int:
        return int(self.counts.sum())

    def add(self, other: "ClassHistogram") -> "ClassHistogram":
        if self.k != other.k:
            raise SegmergeError("histograms cover different class spaces")
        return ClassHistogram(
            counts=self.counts + other.counts, ignored=self.ignored + other.ignored
        )

    def to_json_dict(self) -> dict:
        payload = {str(i): int(c) for i, c in enumerate(self.counts) if c}
        if self.ignored:
            payload[str(IGNORE_ID)] = self.ignored
        return {"counts": payload, "total_eval_pixels": self.total_eval_pixels}


def histogram_of(raster_ids: np.ndarray, k: int) -> ClassHistogram:
    """Tally one universal raster."""
    counts = np.bincount(raster_ids.reshape(-1), minlength=256).astype(np.int64)
    if counts[k:IGNORE_ID].any():
        bad = int(np.nonzero(counts[k:IGNORE_ID])[0][0]) + k
        raise SegmergeError(f"id {bad} is outside the {k}-class universal label-space")
    return ClassHistogram(counts=counts[:k].copy(), ignored=int(counts[IGNORE_ID]))


def record_histogram(
    record: Record,
    taxonomies: Mapping[str, DatasetTaxonomy],
    class_map: ClassMap,
    k: int,
    *,
    strict: bool = True,
) -> ClassHistogram:
    """Decode, remap and tally one record's annotation. Files already in
    the universal space (the ``.universal.png`` naming) are tallied as-is."""
    if record.annotation_path.endswith(".universal.png"):
        return histogram_of(load_universal(record.annotation_path).ids, k)
    taxonomy = taxonomies.get(record.dataset_id)
    if taxonomy is None:
        raise SegmergeError(f"no taxonomy for dataset {record.dataset_id!r}")
    lut = build_lut(class_map, record.dataset_id, strict=strict)
    raster = load_annotation(record.annotation_path, taxonomy, strict=strict)
    return histogram_of(remap(raster, lut).ids, k)


def class_histogram(
    records: Sequence[Record],
    taxonomies: Mapping[str, DatasetTaxonomy],
    class_map: ClassMap,
    k: int,
    *,
    strict: bool = True,
) -> ClassHistogram:
    """Exact pixel counts over the universal space for a set of records."""
    total = ClassHistogram(counts=np.zeros(k, dtype=np.int64))
    for record in records:
        total = total.add(
            record_histogram(record, taxonomies, class_map, k, strict=strict)
        )
    return total


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write records as tab-separated lines; rejected pairs go to a
    ``.rejected.tsv`` sidecar with the reason in a seventh column."""
    path = Path(path)
    lines = [
        "\t".join(
            (
                r.dataset_id,
                r.image_path,
                r.annotation_path,
                str(r.width),
                str(r.height),
                r.split,
            )
        )
        for r in manifest.records
    ]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    sidecar = Path(str(path) + ".rejected.tsv")
    if not manifest.rejected:
        # a stale sidecar would contradict the manifest it sits next to
        sidecar.unlink(missing_ok=True)
    else:
        rows = [
            "\t".join(
                (
                    r.dataset_id,
                    r.image_path,
                    r.annotation_path,
                    str(r.width),
                    str(r.height),
                    r.split,
                    reason,
                )
            )
            for r, reason in manifest.rejected
        ]
        sidecar.write_text("".join(row + "\n" for row in rows), encoding="utf-8")


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    records = [_record_from_line(line, i) for i, line in _tsv_lines(path)]
    rejected: list[tuple[Record, str]] = []
    sidecar = Path(str(path) + ".rejected.tsv")
    if sidecar.exists():
        for i, line in _tsv_lines(sidecar):
            fields = line.split("\t")
            if len(fields) != 7:
                raise SegmergeError(f"{sidecar}:{i}: expected 7 tab-separated fields")
            rejected.append((_record_from_line("\t".join(fields[:6]), i), fields[6]))
    keys = [r.key for r in records]
    if len(set(keys)) != len(keys):
        raise SegmergeError(f"duplicate record key in {path}")
    return Manifest(records=tuple(records), rejected=tuple(rejected))


def _tsv_lines(path: Path) -> Iterable[tuple[int, str]]:
    text = path.read_text(encoding="utf-8")
    return [
        (i, line) for i, line in enumerate(text.splitlines(), start=1) if line.strip()
    ]


def _record_from_line(line: str, lineno: int) -> Record:
    fields = line.split("\t")
    if len(fields) != 6:
        raise SegmergeError(f"manifest line {lineno}: expected 6 tab-separated fields")
    dataset_id, image_path, annotation_path, width, height, split = fields
    if split not in SPLITS:
        raise SegmergeError(f"manifest line {lineno}: unknown split {split!r}")
    try:
        w, h = int(width), int(height)
    except ValueError as exc:
        raise SegmergeError(f"manifest line {lineno}: bad dimensions") from exc
    return Record(
        dataset_id=dataset_id,
        image_path=image_path,
        annotation_path=annotation_path,
        width=w,
        height=h,
        split=split,
    )
