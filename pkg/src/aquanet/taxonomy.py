"""Label-space definitions: class ids, groups, the aquatic subset and the
two-path channel split.

The shipped ATLANTIS taxonomy (``data/atlantis.yaml``) has 56 classes in
reading order artificial -> natural -> general, of which exactly 17 carry
``aquatic: true``. The aquatic flag is independent of the group: canal,
ditch, reservoir and swimming pool are artificial yet aquatic.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import yaml

from .errors import MalformedTaxonomy

GROUPS = ("artificial", "natural", "general")

DEFAULT_IGNORE_ID = 255


@dataclass(frozen=True)
class ClassDef:
    id: int
    name: str
    group: str
    aquatic: bool


@dataclass(frozen=True)
class ClassTaxonomy:
    """Immutable, validated label space. Safe to share across threads."""

    classes: tuple[ClassDef, ...]
    ignore_id: int = DEFAULT_IGNORE_ID
    _by_name: dict = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        _validate(self.classes, self.ignore_id)
        object.__setattr__(self, "_by_name", {c.name: c for c in self.classes})

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    def aquatic_ids(self) -> list[int]:
        return [c.id for c in self.classes if c.aquatic]

    def group_ids(self, group: str) -> list[int]:
        return [c.id for c in self.classes if c.group == group]

    def class_by_name(self, name: str) -> ClassDef:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"unknown class name {name!r}") from None

    def to_dict(self) -> dict:
        return {
            "ignore_id": self.ignore_id,
            "classes": [
                {"id": c.id, "name": c.name, "group": c.group, "aquatic": c.aquatic}
                for c in self.classes
            ],
        }


def _validate(classes, ignore_id) -> None:
    if not classes:
        raise MalformedTaxonomy("taxonomy has no classes")
    ids = [c.id for c in classes]
    if len(set(ids)) != len(ids):
        dup = sorted(i for i in set(ids) if ids.count(i) > 1)
        raise MalformedTaxonomy(f"duplicate class ids: {dup}")
    if sorted(ids) != list(range(len(ids))):
        raise MalformedTaxonomy(
            f"class ids must be contiguous 0..{len(ids) - 1}, got {sorted(ids)}"
        )
    names = [c.name for c in classes]
    if len(set(names)) != len(names):
        dup = sorted(n for n in set(names) if names.count(n) > 1)
        raise MalformedTaxonomy(f"duplicate class names: {dup}")
    for c in classes:
        if c.name != c.name.strip().lower():
            raise MalformedTaxonomy(f"class name not canonical lowercase: {c.name!r}")
        if c.group not in GROUPS:
            raise MalformedTaxonomy(f"class {c.name!r} has unknown group {c.group!r}")
    if 0 <= ignore_id < len(classes):
        raise MalformedTaxonomy(
            f"ignore_id {ignore_id} collides with class ids 0..{len(classes) - 1}"
        )


def load_taxonomy(source) -> ClassTaxonomy:
    """Load and validate a taxonomy from a YAML path, YAML text or dict.

    The document must carry a ``classes`` list of {id, name, group, aquatic}
    entries and may carry an ``ignore_id`` (default 255).
    """
    if isinstance(source, dict):
        doc = source
    else:
        text = source
        if hasattr(source, "read"):
            text = source.read()
        else:
            text = str(source)
            if "\n" not in text:  # a path, not inline YAML
                with open(text, "r", encoding="utf-8") as fh:
                    text = fh.read()
        doc = yaml.safe_load(text)
    if not isinstance(doc, dict) or "classes" not in doc:
        raise MalformedTaxonomy("taxonomy document must be a mapping with a 'classes' list")
    classes = []
    for entry in doc["classes"]:
        try:
            classes.append(
                ClassDef(
                    id=int(entry["id"]),
                    name=str(entry["name"]),
                    group=str(entry["group"]),
                    aquatic=bool(entry["aquatic"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedTaxonomy(f"bad class entry {entry!r}: {exc}") from exc
    ignore_id = int(doc.get("ignore_id", DEFAULT_IGNORE_ID))
    classes.sort(key=lambda c: c.id)
    return ClassTaxonomy(classes=tuple(classes), ignore_id=ignore_id)


def load_atlantis() -> ClassTaxonomy:
    """The shipped 56-class ATLANTIS taxonomy."""
    ref = importlib.resources.files("aquanet").joinpath("data/atlantis.yaml")
    return load_taxonomy(ref.read_text(encoding="utf-8"))


def path_split(tax: ClassTaxonomy) -> tuple[list[int], list[int]]:
    """Split class ids into (aquatic, non-aquatic), each sorted ascending.

    The two lists define the channel order of the aquatic / non-aquatic
    score maps; ``reassembly_permutation`` maps their concatenation back to
    taxonomy id order.
    """
    aquatic = sorted(c.id for c in tax.classes if c.aquatic)
    rest = sorted(c.id for c in tax.classes if not c.aquatic)
    return aquatic, rest


def reassembly_permutation(tax: ClassTaxonomy) -> list[int]:
    """perm[c] = position of class c in the concatenated (aquatic ++ rest) order.

    Indexing the concatenated channels with this permutation restores
    taxonomy id order.
    """
    aquatic, rest = path_split(tax)
    order = aquatic + rest
    perm = [0] * len(order)
    for pos, cid in enumerate(order):
        perm[cid] = pos
    return perm
