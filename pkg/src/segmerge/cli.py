"""Batch command-line surface for the whole pipeline.

Subcommands: merge, ingest, split, remap, eval, stats. Defaults may come
from a JSON file given with --config; explicit flags win. Environment
variables are never consulted. Logs go to standard error without
timestamps; written reports carry content digests of their inputs, never
wall-clock values, so reruns on unchanged inputs are byte-identical.

Exit codes: 0 success, 1 data errors (missing or malformed inputs),
2 usage errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import catalog, metrics, splitter
from .errors import SegmergeError
from .raster import load_annotation, load_universal, remap, write_universal_png
from .taxonomy import (
    IGNORE_ID,
    ClassMap,
    DatasetTaxonomy,
    UniversalLabelSpace,
    build_lut,
    class_map_from_space,
    merge_label_spaces,
    parse_directives,
    parse_taxonomy,
    space_from_json,
    space_to_json,
)

log = logging.getLogger("segmerge")

_MODES = ("strict", "lenient")


class UsageError(Exception):
    """Bad flags or bad config keys; mapped to exit code 2."""


def _read_text(path: str | Path) -> str:
    path = Path(path)
    if not path.is_file():
        raise SegmergeError(f"missing input file: {path}")
    return path.read_text(encoding="utf-8")


def _sha256(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


def _file_digest(path: str | Path) -> str:
    path = Path(path)
    if not path.is_file():
        raise SegmergeError(f"missing input file: {path}")
    return _sha256(path.read_bytes())


def _tree_digest(root: Path, rel_paths: Sequence[str]) -> str:
    """Digest of a file set: hash of the (path, content hash) listing."""
    listing = "".join(
        f"{rel}\t{_file_digest(root / rel)}\n" for rel in sorted(rel_paths)
    )
    return _sha256(listing.encode("utf-8"))


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


class Settings:
    """Merges --config values under explicit CLI flags.

    Every subcommand pulls each setting it understands through get();
    leftover config keys are reported as usage errors so typos do not
    silently fall back to defaults.
    """

    def __init__(self, args: argparse.Namespace):
        self._args = vars(args)
        self._config: dict = {}
        self._seen: set[str] = set()
        config_path = self._args.get("config")
        if config_path:
            try:
                loaded = json.loads(_read_text(config_path))
            except json.JSONDecodeError as exc:
                raise SegmergeError(f"malformed config file {config_path}: {exc}")
            if not isinstance(loaded, dict):
                raise SegmergeError(f"config file {config_path} must hold a JSON object")
            self._config = loaded

    def get(self, name: str, default=None):
        self._seen.add(name)
        value = self._args.get(name)
        if value is None:
            value = self._config.get(name, default)
        return value

    def require(self, name: str):
        value = self.get(name)
        if value is None:
            raise UsageError(f"missing required setting --{name.replace('_', '-')}")
        return value

    def check_unknown(self) -> None:
        unknown = sorted(set(self._config) - self._seen)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")


def _as_path_list(value) -> list[str]:
    if isinstance(value, str):
        return [p for p in value.split(",") if p]
    if isinstance(value, (list, tuple)):
        return [str(p) for p in value]
    raise UsageError(f"expected a path list, got {value!r}")


def _load_taxonomies(paths: Iterable[str]) -> tuple[list[DatasetTaxonomy], dict]:
    taxonomies = []
    digests = {}
    for path in paths:
        text = _read_text(path)
        taxonomy = parse_taxonomy(text)
        taxonomies.append(taxonomy)
        digests[taxonomy.dataset_id] = _sha256(text.encode("utf-8"))
    return taxonomies, digests


def _load_space(path: str) -> UniversalLabelSpace:
    return space_from_json(_read_text(path))


def _check_mode(mode: str) -> bool:
    if mode not in _MODES:
        raise SegmergeError(f"mode must be one of {_MODES}, got {mode!r}")
    return mode == "strict"


def _parallel_map(fn: Callable, items: Sequence, workers: int) -> list:
    """Order-preserving map; results are reduced in input order by the
    callers, so the outcome is identical for any worker count."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _int_setting(settings: Settings, name: str, default: int) -> int:
    value = settings.get(name, default)
    try:
        return int(value)
    except (TypeError, ValueError):
        raise UsageError(f"--{name.replace('_', '-')} expects an integer, got {value!r}")


# ---------------------------------------------------------------- merge


def cmd_merge(settings: Settings) -> int:
    taxonomy_paths = _as_path_list(settings.require("taxonomies"))
    directive_path = settings.get("directives")
    out_dir = Path(settings.get("out", "."))
    settings.check_unknown()

    taxonomies, taxonomy_digests = _load_taxonomies(taxonomy_paths)
    directives = ()
    directives_digest = None
    if directive_path:
        text = _read_text(directive_path)
        directives = parse_directives(text, taxonomies)
        directives_digest = _sha256(text.encode("utf-8"))

    space, _ = merge_label_spaces(taxonomies, directives)

    out_dir.mkdir(parents=True, exist_ok=True)
    space_doc = space_to_json(space)
    (out_dir / "label_space.json").write_text(space_doc, encoding="utf-8")

    counts = {t.dataset_id: len(t.eval_classes) for t in taxonomies}
    baseline_id = max(counts, key=lambda ds: (counts[ds], ds))
    baseline = counts[baseline_id]
    expansion = (space.k - baseline) / baseline
    percent_int = metrics.format_percent(expansion, decimals=0)

    summary = {
        "universal_classes": space.k,
        "ignore_id": space.ignore_id,
        "datasets": [
            {
                "id": t.dataset_id,
                "classes": counts[t.dataset_id],
                "taxonomy_sha256": taxonomy_digests[t.dataset_id],
            }
            for t in taxonomies
        ],
        "directives_sha256": directives_digest,
        "expansion": {
            "baseline_dataset": baseline_id,
            "baseline_classes": baseline,
            "percent": expansion * 100.0,
            "percent_rounded": percent_int,
        },
        "label_space_sha256": _sha256(space_doc.encode("utf-8")),
    }
    _write_json(out_dir / "merge_summary.json", summary)

    for t in taxonomies:
        print(f"{t.dataset_id}: {counts[t.dataset_id]} classes")
    print(f"universal label-space: {space.k} classes (ignore id {space.ignore_id})")
    print(f"expansion vs largest input ({baseline_id}, {baseline}): +{percent_int}%")
    log.info("wrote %s", out_dir / "label_space.json")
    log.info("wrote %s", out_dir / "merge_summary.json")
    return 0


# ---------------------------------------------------------------- ingest


def cmd_ingest(settings: Settings) -> int:
    manifest_path = Path(settings.require("manifest"))
    dataset_id = settings.get("dataset")
    if dataset_id:
        specs = [
            {
                "id": dataset_id,
                "root": settings.require("root"),
                "images": settings.require("images"),
                "annotations": settings.require("annotations"),
            }
        ]
    else:
        for name in ("root", "images", "annotations"):
            settings.get(name)
        specs = settings.get("datasets")
        if not specs:
            raise UsageError("give --dataset/--root/--images/--annotations or a config with a datasets list")
    settings.check_unknown()

    records: list[catalog.Record] = []
    rejected: list[tuple[catalog.Record, str]] = []
    for spec in specs:
        try:
            rule = catalog.PairingRule(
                image_pattern=spec["images"], annotation_pattern=spec["annotations"]
            )
            scanned = catalog.scan_dataset(spec["id"], spec["root"], rule)
        except KeyError as exc:
            raise UsageError(f"dataset spec needs key {exc}")
        checked = catalog.validate_pairs(scanned)
        records.extend(checked.records)
        rejected.extend(checked.rejected)
        log.info(
            "%s: %d records, %d rejected",
            spec["id"],
            len(checked.records),
            len(checked.rejected),
        )

    manifest = catalog.Manifest(records=tuple(records), rejected=tuple(rejected))
    keys = [r.key for r in manifest.records]
    if len(set(keys)) != len(keys):
        raise SegmergeError("duplicate record key across ingested datasets")
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    catalog.save_manifest(manifest, manifest_path)
    log.info("wrote %s", manifest_path)
    return 0


# ---------------------------------------------------------------- split


def _record_histograms(
    records: Sequence[catalog.Record],
    taxonomies: Sequence[DatasetTaxonomy],
    class_map: ClassMap,
    k: int,
    strict: bool,
    workers: int,
) -> list[catalog.ClassHistogram]:
    by_id = {t.dataset_id: t for t in taxonomies}
    return _parallel_map(
        lambda r: catalog.record_histogram(r, by_id, class_map, k, strict=strict),
        records,
        workers,
    )


def cmd_split(settings: Settings) -> int:
    manifest_path = Path(settings.require("manifest"))
    taxonomy_paths = _as_path_list(settings.require("taxonomies"))
    space_path = settings.require("space")
    fraction = float(settings.get("fraction", 0.2))
    seed = _int_setting(settings, "seed", 0)
    sweeps = _int_setting(settings, "sweeps", 3)
    workers = _int_setting(settings, "workers", 1)
    strict = _check_mode(settings.get("mode", "strict"))
    only = settings.get("datasets")
    settings.check_unknown()

    manifest = catalog.load_manifest(_require_file(manifest_path))
    taxonomies, _ = _load_taxonomies(taxonomy_paths)
    space = _load_space(space_path)
    class_map = class_map_from_space(space, taxonomies)

    chosen_ids = set(_as_path_list(only)) if only else None
    targets = [
        r
        for r in manifest.records
        if chosen_ids is None or r.dataset_id in chosen_ids
    ]
    if not targets:
        raise SegmergeError("no manifest records selected for splitting")

    histograms = _record_histograms(targets, taxonomies, class_map, space.k, strict, workers)
    plan = splitter.propose_split(
        {r.key: h.counts for r, h in zip(targets, histograms)},
        target_fraction=fraction,
        seed=seed,
        sweeps=sweeps,
    )

    updated = []
    for record in manifest.records:
        if record.key in plan.val_records:
            updated.append(replace(record, split="val"))
        elif record.key in plan.train_records:
            updated.append(replace(record, split="train"))
        else:
            updated.append(record)
    catalog.save_manifest(
        catalog.Manifest(records=tuple(updated), rejected=manifest.rejected),
        manifest_path,
    )

    sidecar = Path(str(manifest_path) + ".split.json")
    _write_json(
        sidecar,
        {
            "seed": seed,
            "fraction": fraction,
            "sweeps": sweeps,
            "divergence": plan.divergence,
        },
    )
    log.info(
        "split %d records: %d val / %d train, divergence %.6f",
        len(targets),
        len(plan.val_records),
        len(plan.train_records),
        plan.divergence,
    )
    log.info("wrote %s", sidecar)
    return 0


# ---------------------------------------------------------------- remap


def _universal_name(annotation_path: str) -> str:
    stem = Path(annotation_path).name
    for suffix in (".png", ".bmp", ".PNG", ".BMP"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
            break
    return stem + ".universal.png"


def cmd_remap(settings: Settings) -> int:
    manifest_path = Path(settings.require("manifest"))
    taxonomy_paths = _as_path_list(settings.require("taxonomies"))
    space_path = settings.require("space")
    out_dir = Path(settings.require("out"))
    workers = _int_setting(settings, "workers", 1)
    strict = _check_mode(settings.get("mode", "strict"))
    allow_16bit = bool(settings.get("allow_16bit", False))
    settings.check_unknown()

    manifest = catalog.load_manifest(_require_file(manifest_path))
    taxonomies, _ = _load_taxonomies(taxonomy_paths)
    by_id = {t.dataset_id: t for t in taxonomies}
    space = _load_space(space_path)
    class_map = class_map_from_space(space, taxonomies)
    luts = {ds: build_lut(class_map, ds, strict=strict) for ds in by_id}

    out_paths: dict[tuple[str, str], Path] = {}
    seen: set[Path] = set()
    for record in manifest.records:
        taxonomy = by_id.get(record.dataset_id)
        if taxonomy is None:
            raise SegmergeError(f"no taxonomy for dataset {record.dataset_id!r}")
        target = out_dir / record.dataset_id / _universal_name(record.annotation_path)
        if target in seen:
            raise SegmergeError(f"two annotations map to the same output file: {target}")
        seen.add(target)
        out_paths[record.key] = target

    def work(record: catalog.Record) -> None:
        raster = load_annotation(
            record.annotation_path, by_id[record.dataset_id],
            strict=strict, allow_16bit=allow_16bit,
        )
        target = out_paths[record.key]
        target.parent.mkdir(parents=True, exist_ok=True)
        write_universal_png(target, remap(raster, luts[record.dataset_id]), space.k)

    _parallel_map(work, manifest.records, workers)

    updated = tuple(
        replace(r, annotation_path=str(out_paths[r.key]))
        for r in manifest.records
    )
    out_manifest = out_dir / "manifest.tsv"
    catalog.save_manifest(
        catalog.Manifest(records=updated, rejected=manifest.rejected), out_manifest
    )
    log.info("remapped %d annotations under %s", len(updated), out_dir)
    log.info("wrote %s", out_manifest)
    return 0


# ---------------------------------------------------------------- eval


def _png_tree(root: Path) -> dict[str, list[str]]:
    """dataset id -> sorted relative file paths under <root>/<dataset>/."""
    if not root.is_dir():
        raise SegmergeError(f"missing input directory: {root}")
    tree: dict[str, list[str]] = {}
    for child in sorted(root.iterdir()):
        if child.is_dir():
            files = sorted(
                str(p.relative_to(root)) for p in child.rglob("*.png") if p.is_file()
            )
            if files:
                tree[child.name] = files
    if not tree:
        raise SegmergeError(f"no <dataset>/<file>.png entries under {root}")
    return tree


def cmd_eval(settings: Settings) -> int:
    gt_root = Path(settings.require("gt"))
    pred_root = Path(settings.require("pred"))
    space_path = settings.require("space")
    out_dir = Path(settings.get("out", "."))
    workers = _int_setting(settings, "workers", 1)
    settings.check_unknown()

    space = _load_space(space_path)
    tree = _png_tree(gt_root)
    if "_meta" in tree:
        raise SegmergeError('dataset directory "_meta" clashes with the report metadata key')

    pairs: list[tuple[str, str]] = []
    for dataset_id, files in tree.items():
        for rel in files:
            if not (pred_root / rel).is_file():
                raise SegmergeError(f"missing prediction file: {pred_root / rel}")
            pairs.append((dataset_id, rel))

    reach = {ds: space.reachable(ds) for ds in tree}

    def work(pair: tuple[str, str]) -> tuple[np.ndarray, int, int]:
        dataset_id, rel = pair
        gt = load_universal(gt_root / rel)
        pred = load_universal(pred_root / rel)
        update = metrics.accumulate(metrics.ConfusionMatrix.zero(space.k), gt, pred)
        inside, total = metrics.exclusivity_counts(pred, reach[dataset_id])
        return update.counts, inside, total

    results = _parallel_map(work, pairs, workers)

    confusions = {ds: metrics.ConfusionMatrix.zero(space.k) for ds in tree}
    inside_counts = {ds: 0 for ds in tree}
    total_counts = {ds: 0 for ds in tree}
    for (dataset_id, _), (counts, inside, total) in zip(pairs, results):
        confusions[dataset_id] = metrics.merge_confusions(
            confusions[dataset_id], metrics.ConfusionMatrix(k=space.k, counts=counts)
        )
        inside_counts[dataset_id] += inside
        total_counts[dataset_id] += total

    exclusivity = {}
    for ds in tree:
        if total_counts[ds] == 0:
            raise SegmergeError(f"dataset {ds!r} predictions hold no non-ignore pixel")
        exclusivity[ds] = inside_counts[ds] / total_counts[ds]

    report = metrics.per_domain_report(confusions, space, exclusivity=exclusivity)
    table = metrics.report_table(report, space)

    doc = dict(report["datasets"])
    doc["_meta"] = {
        "averaging": report["averaging"],
        "k": space.k,
        "inputs": {
            "label_space": _file_digest(space_path),
            "gt": _tree_digest(gt_root, [rel for _, rel in pairs]),
            "pred": _tree_digest(pred_root, [rel for _, rel in pairs]),
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "eval_report.json", doc)
    (out_dir / "eval_report.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    log.info("wrote %s", out_dir / "eval_report.json")
    return 0


# ---------------------------------------------------------------- stats


def cmd_stats(settings: Settings) -> int:
    manifest_path = Path(settings.require("manifest"))
    taxonomy_paths = _as_path_list(settings.require("taxonomies"))
    space_path = settings.require("space")
    out_dir = Path(settings.get("out", "."))
    workers = _int_setting(settings, "workers", 1)
    strict = _check_mode(settings.get("mode", "strict"))
    settings.check_unknown()

    manifest = catalog.load_manifest(_require_file(manifest_path))
    if not manifest.records:
        raise SegmergeError(f"manifest {manifest_path} holds no records")
    taxonomies, _ = _load_taxonomies(taxonomy_paths)
    space = _load_space(space_path)
    class_map = class_map_from_space(space, taxonomies)

    histograms = _record_histograms(
        manifest.records, taxonomies, class_map, space.k, strict, workers
    )

    zero = catalog.ClassHistogram(counts=np.zeros(space.k, dtype=np.int64))
    per_dataset: dict[str, catalog.ClassHistogram] = {}
    per_split: dict[str, catalog.ClassHistogram] = {}
    split_records: dict[str, int] = {}
    rollup = zero
    for record, histogram in zip(manifest.records, histograms):
        per_dataset[record.dataset_id] = per_dataset.get(record.dataset_id, zero).add(histogram)
        per_split[record.split] = per_split.get(record.split, zero).add(histogram)
        split_records[record.split] = split_records.get(record.split, 0) + 1
        rollup = rollup.add(histogram)

    counts_by_dataset: dict[str, int] = {}
    for record in manifest.records:
        counts_by_dataset[record.dataset_id] = counts_by_dataset.get(record.dataset_id, 0) + 1

    doc: dict = {
        "datasets": {
            ds: {"records": counts_by_dataset[ds], **h.to_json_dict()}
            for ds, h in sorted(per_dataset.items())
        },
        "universal": {"records": len(manifest.records), **rollup.to_json_dict()},
        "inputs": {
            "manifest": _file_digest(manifest_path),
            "label_space": _file_digest(space_path),
        },
    }
    if "val" in per_split and "train" in per_split:
        divergence = splitter.split_divergence(per_split["val"], per_split["train"])
        doc["split"] = {
            "divergence": divergence,
            "val": {"records": split_records["val"], **per_split["val"].to_json_dict()},
            "train": {"records": split_records["train"], **per_split["train"].to_json_dict()},
        }

    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "stats.json", doc)

    for ds in sorted(per_dataset):
        h = per_dataset[ds]
        present = int((h.counts > 0).sum())
        print(
            f"{ds}: {counts_by_dataset[ds]} records, {present} classes present, "
            f"{h.total_eval_pixels} eval pixels"
        )
    present = int((rollup.counts > 0).sum())
    print(
        f"universal: {len(manifest.records)} records, {present} of {space.k} classes "
        f"present, {rollup.total_eval_pixels} eval pixels"
    )
    if "split" in doc:
        print(f"split divergence (val vs train): {doc['split']['divergence']:.6f}")
    log.info("wrote %s", out_dir / "stats.json")
    return 0


# ---------------------------------------------------------------- driver


def _require_file(path: Path) -> Path:
    if not path.is_file():
        raise SegmergeError(f"missing input file: {path}")
    return path


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with default settings")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segmerge",
        description="Merge segmentation label-spaces and run the dataset pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", help="merge dataset taxonomies into a universal label-space")
    _add_common(p)
    p.add_argument("--taxonomies", help="comma-separated taxonomy files")
    p.add_argument("--directives", help="merge/rename/map_ignore directive file")
    p.add_argument("--out", help="output directory (default .)")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("ingest", help="scan dataset roots into a validated manifest")
    _add_common(p)
    p.add_argument("--dataset", help="dataset id")
    p.add_argument("--root", help="dataset root directory")
    p.add_argument("--images", help="image path template with one {stem}")
    p.add_argument("--annotations", help="annotation path template with one {stem}")
    p.add_argument("--manifest", help="manifest file to write")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="assign class-balanced train/val splits")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--taxonomies")
    p.add_argument("--space", help="label_space.json from merge")
    p.add_argument("--fraction", type=float, help="validation fraction (default 0.2)")
    p.add_argument("--seed", type=int)
    p.add_argument("--sweeps", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--mode", choices=_MODES)
    p.add_argument("--datasets", help="only split these datasets (comma-separated)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("remap", help="rewrite annotations into the universal label-space")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--taxonomies")
    p.add_argument("--space")
    p.add_argument("--out", help="output root for <dataset>/<stem>.universal.png")
    p.add_argument("--workers", type=int)
    p.add_argument("--mode", choices=_MODES)
    p.add_argument("--allow-16bit", dest="allow_16bit", action="store_const", const=True)
    p.set_defaults(func=cmd_remap)

    p = sub.add_parser("eval", help="score universal predictions against ground truth")
    _add_common(p)
    p.add_argument("--gt", help="ground-truth root, <dataset>/<file>.png")
    p.add_argument("--pred", help="prediction root, same layout")
    p.add_argument("--space")
    p.add_argument("--out", help="report directory (default .)")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="report class-pixel histograms and split balance")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--taxonomies")
    p.add_argument("--space")
    p.add_argument("--out", help="report directory (default .)")
    p.add_argument("--workers", type=int)
    p.add_argument("--mode", choices=_MODES)
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        settings = Settings(args)
        return args.func(settings)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (SegmergeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
