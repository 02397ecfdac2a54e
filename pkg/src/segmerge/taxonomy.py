"""Dataset taxonomies and their merge into one universal label-space.

Taxonomy files are line-oriented UTF-8:

    dataset cityscapes encoding=indexed
    class 7 "road"
    ignore 0 "unlabeled"       # excluded from training and evaluation

Directive files describe how label-spaces combine:

    merge cityscapes.person sun_rgbd.person -> "person"
    rename cityscapes.wall "outside wall"
    map_ignore cityscapes.parking

Directive references use the normalized class name with spaces replaced
by underscores (``cityscapes.traffic_light``). Merging assigns universal
ids by first occurrence over (dataset order, local id order), so appending
a new dataset never renumbers existing classes. Ignored classes and
``map_ignore`` targets map to the reserved ignore id 255.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParseError, SegmergeError

IGNORE_ID = 255
UNIVERSAL = "universal"

# Strict-mode LUT entry for ids the taxonomy never declared. Outside the
# uint8 range so remap can detect use before narrowing to 8 bits.
POISON = 256

_DATASET_ID_RE = re.compile(r"^[a-z0-9_]+$")
_HEADER_RE = re.compile(
    r"^dataset\s+(?P<id>\S+)(?:\s+encoding=(?P<enc>\S+))?\s*$"
)
_CLASS_RE = re.compile(r'^(?P<kind>class|ignore)\s+(?P<id>-?\d+)\s+"(?P<name>[^"]*)"\s*$')


def normalize_name(name: str) -> str:
    """Lowercase and collapse runs of whitespace; the comparison form for
    class names everywhere in the package."""
    return " ".join(name.split()).lower()


def directive_token(name: str) -> str:
    """How a class name is written in directive files."""
    return normalize_name(name).replace(" ", "_")


@dataclass(frozen=True)
class ClassDef:
    id: int
    name: str
    ignored: bool = False

    @property
    def normalized(self) -> str:
        return normalize_name(self.name)


@dataclass(frozen=True)
class DatasetTaxonomy:
    dataset_id: str
    classes: tuple[ClassDef, ...]
    encoding: str = "indexed"

    @property
    def eval_classes(self) -> tuple[ClassDef, ...]:
        return tuple(c for c in self.classes if not c.ignored)

    def by_id(self, class_id: int) -> ClassDef | None:
        for c in self.classes:
            if c.id == class_id:
                return c
        return None

    def find(self, token: str) -> ClassDef | None:
        """Look up a class by its directive token form."""
        for c in self.classes:
            if directive_token(c.name) == token:
                return c
        return None


@dataclass(frozen=True)
class Directive:
    kind: str  # merge | rename | map_ignore
    operands: tuple[tuple[str, str], ...]  # (dataset_id, normalized name)
    new_name: str | None = None


@dataclass(frozen=True)
class UniversalClass:
    id: int
    name: str
    contributors: tuple[tuple[str, int], ...]  # (dataset_id, local id)


@dataclass(frozen=True)
class UniversalLabelSpace:
    classes: tuple[UniversalClass, ...]
    ignore_id: int = IGNORE_ID

    @property
    def k(self) -> int:
        return len(self.classes)

    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.classes)

    def datasets(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for c in self.classes:
            for ds, _ in c.contributors:
                seen.setdefault(ds, None)
        return tuple(seen)

    def reachable(self, dataset_id: str) -> frozenset[int]:
        """Universal ids with at least one contributor from the dataset."""
        return frozenset(
            c.id for c in self.classes if any(ds == dataset_id for ds, _ in c.contributors)
        )


@dataclass(frozen=True)
class ClassMap:
    """Total mapping (dataset_id, local id) -> universal id, 255 for ignored."""

    entries: Mapping[tuple[str, int], int] = field(default_factory=dict)

    def lookup(self, dataset_id: str, local_id: int) -> int:
        return self.entries[(dataset_id, local_id)]

    def datasets(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for ds, _ in self.entries:
            seen.setdefault(ds, None)
        return tuple(seen)


@dataclass(frozen=True)
class Lut:
    """256-entry lookup table compiled from a ClassMap for one dataset.

    ``table`` holds universal ids as uint16 so strict mode can park the
    out-of-band POISON value on undeclared local ids; remapping narrows to
    uint8 after checking for poison hits.
    """

    dataset_id: str
    table: np.ndarray
    strict: bool


def _strip_comment(line: str) -> str:
    # '#' starts a comment unless it sits inside a quoted name
    in_quote = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_quote = not in_quote
        elif ch == "#" and not in_quote:
            return line[:i]
    return line


def parse_taxonomy(text: str) -> DatasetTaxonomy:
    """Parse one dataset taxonomy document.

    Raises ParseError (with a line number) on duplicate ids, duplicate
    normalized names, a missing or repeated dataset header, out-of-range
    ids, or lines matching no rule.
    """
    dataset_id: str | None = None
    encoding = "indexed"
    classes: list[ClassDef] = []
    ids_seen: dict[int, int] = {}
    names_seen: dict[str, int] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue

        header = _HEADER_RE.match(line)
        if header:
            if dataset_id is not None:
                raise ParseError("duplicate dataset header", lineno)
            dataset_id = header.group("id")
            if not _DATASET_ID_RE.match(dataset_id):
                raise ParseError(
                    f"dataset id {dataset_id!r} must match [a-z0-9_]+", lineno
                )
            enc = header.group("enc")
            if enc is not None:
                if enc not in ("indexed", "color-coded"):
                    raise ParseError(f"unknown encoding {enc!r}", lineno)
                encoding = enc
            continue

        entry = _CLASS_RE.match(line)
        if entry is None:
            raise ParseError(f"malformed line: {raw.strip()!r}", lineno)
        if dataset_id is None:
            raise ParseError("class line before dataset header", lineno)

        ignored = entry.group("kind") == "ignore"
        class_id = int(entry.group("id"))
        name = entry.group("name")

        if not normalize_name(name):
            raise ParseError("empty class name", lineno)
        if class_id < 0:
            raise ParseError(f"negative class id {class_id}", lineno)
        if not ignored and class_id > IGNORE_ID - 1:
            raise ParseError(
                f"id {class_id} out of range for an evaluation class (255 is reserved)",
                lineno,
            )
        if ignored and class_id > IGNORE_ID:
            raise ParseError(f"id {class_id} does not fit 8-bit annotations", lineno)
        if class_id in ids_seen:
            raise ParseError(
                f"duplicate id {class_id} (first declared on line {ids_seen[class_id]})",
                lineno,
            )
        key = normalize_name(name)
        if key in names_seen:
            raise ParseError(
                f"duplicate class name {key!r} (first declared on line {names_seen[key]})",
                lineno,
            )

        ids_seen[class_id] = lineno
        names_seen[key] = lineno
        classes.append(ClassDef(id=class_id, name=name, ignored=ignored))

    if dataset_id is None:
        raise ParseError("missing dataset header")
    if not any(not c.ignored for c in classes):
        raise ParseError(f"dataset {dataset_id!r} declares no evaluation class")
    return DatasetTaxonomy(dataset_id=dataset_id, classes=tuple(classes), encoding=encoding)


def _resolve_operand(
    ref: str, by_dataset: Mapping[str, DatasetTaxonomy], lineno: int
) -> tuple[str, str]:
    if "." not in ref:
        raise ParseError(f"reference {ref!r} must look like dataset.class_name", lineno)
    ds, token = ref.split(".", 1)
    taxonomy = by_dataset.get(ds)
    if taxonomy is None:
        raise ParseError(f"unknown dataset {ds!r} in reference {ref!r}", lineno)
    cls = taxonomy.find(token)
    if cls is None:
        raise ParseError(f"unknown class {ref!r}", lineno)
    if cls.ignored:
        raise ParseError(f"{ref!r} refers to an ignored class", lineno)
    return ds, cls.normalized


def parse_directives(
    text: str, taxonomies: Sequence[DatasetTaxonomy]
) -> list[Directive]:
    """Parse and resolve a directive document against already-parsed taxonomies."""
    by_dataset = {t.dataset_id: t for t in taxonomies}
    all_names = {
        c.normalized for t in taxonomies for c in t.classes if not c.ignored
    }
    directives: list[Directive] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        tokens = line.split()
        kind = tokens[0]

        if kind == "merge":
            if "->" not in tokens:
                raise ParseError("merge needs '-> \"<new name>\"'", lineno)
            arrow = tokens.index("->")
            refs = tokens[1:arrow]
            new_name = _quoted_name(" ".join(tokens[arrow + 1 :]), lineno)
            if len(refs) < 2:
                raise ParseError("merge needs at least 2 operands", lineno)
            operands = tuple(_resolve_operand(r, by_dataset, lineno) for r in refs)
            if len({ds for ds, _ in operands}) < 2:
                raise ParseError(
                    "merge operands must come from at least 2 distinct datasets", lineno
                )
            if len(set(operands)) != len(operands):
                raise ParseError("merge lists the same class twice", lineno)
            directives.append(Directive("merge", operands, new_name))

        elif kind == "rename":
            if len(tokens) < 3:
                raise ParseError("rename needs a reference and a quoted name", lineno)
            operand = _resolve_operand(tokens[1], by_dataset, lineno)
            new_name = _quoted_name(" ".join(tokens[2:]), lineno)
            if normalize_name(new_name) in all_names - {operand[1]}:
                raise ParseError(
                    f"rename target {new_name!r} collides with an existing class name",
                    lineno,
                )
            directives.append(Directive("rename", (operand,), new_name))

        elif kind == "map_ignore":
            if len(tokens) != 2:
                raise ParseError("map_ignore takes exactly one reference", lineno)
            operand = _resolve_operand(tokens[1], by_dataset, lineno)
            directives.append(Directive("map_ignore", (operand,)))

        else:
            raise ParseError(f"unknown directive {kind!r}", lineno)

    return directives


def _quoted_name(text: str, lineno: int) -> str:
    text = text.strip()
    if len(text) < 2 or not text.startswith('"') or not text.endswith('"'):
        raise ParseError(f"expected a quoted name, got {text!r}", lineno)
    name = text[1:-1]
    if not normalize_name(name):
        raise ParseError("empty name", lineno)
    return name


def merge_label_spaces(
    taxonomies: Sequence[DatasetTaxonomy], directives: Iterable[Directive] = ()
) -> tuple[UniversalLabelSpace, ClassMap]:
    """Build the universal label-space and the total class mapping.

    Universal ids follow first-occurrence order: datasets in list order,
    classes in local id order within each dataset. A merged group occupies
    the position of its first contributor. Deterministic for fixed input.
    """
    by_dataset = {t.dataset_id: t for t in taxonomies}
    if len(by_dataset) != len(taxonomies):
        raise SegmergeError("duplicate dataset id among input taxonomies")

    merge_of: dict[tuple[str, str], Directive] = {}
    rename_of: dict[tuple[str, str], str] = {}
    ignored_by_directive: set[tuple[str, str]] = set()
    referenced: dict[tuple[str, str], str] = {}

    for d in directives:
        for operand in d.operands:
            ds, name = operand
            taxonomy = by_dataset.get(ds)
            cls = taxonomy.find(directive_token(name)) if taxonomy else None
            if cls is None or cls.ignored:
                raise SegmergeError(f"directive operand {ds}.{name!r} does not resolve")
            if operand in referenced:
                raise SegmergeError(
                    f"class {ds}.{name!r} referenced by conflicting directives "
                    f"({referenced[operand]} and {d.kind})"
                )
            referenced[operand] = d.kind
            if d.kind == "merge":
                merge_of[operand] = d
            elif d.kind == "rename":
                rename_of[operand] = d.new_name
            else:
                ignored_by_directive.add(operand)

    classes: list[UniversalClass] = []
    entries: dict[tuple[str, int], int] = {}
    merge_slot: dict[int, int] = {}  # id(directive) -> universal id

    for taxonomy in taxonomies:
        for cls in sorted(taxonomy.classes, key=lambda c: c.id):
            key = (taxonomy.dataset_id, cls.id)
            operand = (taxonomy.dataset_id, cls.normalized)
            if cls.ignored or operand in ignored_by_directive:
                entries[key] = IGNORE_ID
                continue

            merge = merge_of.get(operand)
            if merge is not None and id(merge) in merge_slot:
                uid = merge_slot[id(merge)]
                existing = classes[uid]
                classes[uid] = UniversalClass(
                    id=uid,
                    name=existing.name,
                    contributors=existing.contributors + (key,),
                )
            else:
                uid = len(classes)
                if merge is not None:
                    name = merge.new_name
                    merge_slot[id(merge)] = uid
                else:
                    name = rename_of.get(operand, cls.name)
                classes.append(UniversalClass(id=uid, name=name, contributors=(key,)))
            entries[key] = uid

    seen_names: dict[str, str] = {}
    for c in classes:
        key = normalize_name(c.name)
        if key in seen_names:
            raise SegmergeError(
                f"universal name collision: {c.name!r} appears for both "
                f"{seen_names[key]} and {c.contributors[0]}"
            )
        seen_names[key] = f"{c.contributors[0]}"

    space = UniversalLabelSpace(classes=tuple(classes))
    return space, ClassMap(entries=entries)


def build_lut(class_map: ClassMap, dataset_id: str, strict: bool = True) -> Lut:
    """Compile one dataset's mapping into a 256-entry table.

    Undeclared local ids hold 255 in lenient mode and POISON in strict
    mode, so stray pixel values either fold into ignore or fail loudly at
    remap time. Entry 255 is always 255.
    """
    if dataset_id not in class_map.datasets():
        raise SegmergeError(f"unknown dataset {dataset_id!r} in class map")
    fill = POISON if strict else IGNORE_ID
    table = np.full(256, fill, dtype=np.uint16)
    for (ds, local_id), uid in class_map.entries.items():
        if ds == dataset_id:
            table[local_id] = uid
    table[IGNORE_ID] = IGNORE_ID
    table.flags.writeable = False
    return Lut(dataset_id=dataset_id, table=table, strict=strict)


def class_map_from_space(
    space: UniversalLabelSpace, taxonomies: Sequence[DatasetTaxonomy]
) -> ClassMap:
    """Recover the total mapping from a persisted label-space plus the
    taxonomies it was built from. Declared classes without a contributor
    entry map to ignore."""
    contributor_to_uid = {
        (ds, local): c.id for c in space.classes for ds, local in c.contributors
    }
    entries: dict[tuple[str, int], int] = {}
    for taxonomy in taxonomies:
        for cls in taxonomy.classes:
            key = (taxonomy.dataset_id, cls.id)
            entries[key] = contributor_to_uid.get(key, IGNORE_ID)
    missing = set(contributor_to_uid) - set(entries)
    if missing:
        raise SegmergeError(
            f"label-space contributors not covered by the given taxonomies: {sorted(missing)}"
        )
    return ClassMap(entries=entries)


def space_to_json(space: UniversalLabelSpace) -> str:
    payload = {
        "classes": [
            {
                "id": c.id,
                "name": c.name,
                "contributors": [
                    {"dataset": ds, "id": local} for ds, local in c.contributors
                ],
            }
            for c in space.classes
        ],
        "ignore_id": space.ignore_id,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def space_from_json(text: str) -> UniversalLabelSpace:
    try:
        payload = json.loads(text)
        classes = tuple(
            UniversalClass(
                id=int(c["id"]),
                name=str(c["name"]),
                contributors=tuple(
                    (str(e["dataset"]), int(e["id"])) for e in c["contributors"]
                ),
            )
            for c in payload["classes"]
        )
        ignore_id = int(payload["ignore_id"])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise SegmergeError(f"malformed label-space document: {exc}") from exc
    if [c.id for c in classes] != list(range(len(classes))):
        raise SegmergeError("label-space ids must be 0..K-1 in order")
    return UniversalLabelSpace(classes=classes, ignore_id=ignore_id)
