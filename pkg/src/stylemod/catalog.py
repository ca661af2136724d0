"""Tag/attribute catalog: the hierarchy that indexes every conditional network.

A *tag* is an abstract attribute category (e.g. "glasses"); each tag owns at
least two concrete *attributes* (e.g. "with" / "without").  Label vectors are
one-hot within each tag's attribute group, concatenated over tags in catalog
order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class TagSpec:
    name: str
    attributes: tuple[str, ...]
    mask_region: str | None = None  # label of the region mask used by the removal stage

    def __post_init__(self):
        if len(self.attributes) < 2:
            raise CatalogError(f"tag {self.name!r} needs at least 2 attributes")
        if len(set(self.attributes)) != len(self.attributes):
            raise CatalogError(f"tag {self.name!r} has duplicate attributes")


@dataclass(frozen=True)
class TagAttributeCatalog:
    tags: tuple[TagSpec, ...]
    _slot_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = [t.name for t in self.tags]
        if len(set(names)) != len(names):
            raise CatalogError("duplicate tag names")
        if not self.tags:
            raise CatalogError("catalog has no tags")
        slots = {}
        for tag in self.tags:
            for attr in tag.attributes:
                slots[(tag.name, attr)] = len(slots)
        object.__setattr__(self, "_slot_index", slots)

    # -- lookup -----------------------------------------------------------

    @property
    def n_slots(self) -> int:
        return len(self._slot_index)

    @property
    def tag_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tags)

    def tag(self, name: str) -> TagSpec:
        for t in self.tags:
            if t.name == name:
                return t
        raise CatalogError(f"unknown tag {name!r}")

    def attributes_of(self, tag: str) -> tuple[str, ...]:
        return self.tag(tag).attributes

    def has(self, tag: str, attribute: str | None = None) -> bool:
        if attribute is None:
            return any(t.name == tag for t in self.tags)
        return (tag, attribute) in self._slot_index

    def require(self, tag: str, attribute: str | None = None) -> None:
        if not self.has(tag, attribute):
            where = f"({tag!r}, {attribute!r})" if attribute is not None else repr(tag)
            raise CatalogError(f"unknown tag/attribute {where}")

    def slot(self, tag: str, attribute: str) -> int:
        self.require(tag, attribute)
        return self._slot_index[(tag, attribute)]

    def slots_of(self, tag: str) -> list[int]:
        return [self._slot_index[(tag, a)] for a in self.attributes_of(tag)]

    def slot_names(self) -> list[str]:
        """Flattened "tag@attribute" column names in catalog order."""
        return [f"{t.name}@{a}" for t in self.tags for a in t.attributes]

    def other_attribute(self, tag: str, attribute: str) -> str:
        """The opposite attribute for binary tags (errors on >2 attributes)."""
        attrs = self.attributes_of(tag)
        if len(attrs) != 2:
            raise CatalogError(f"tag {tag!r} is not binary")
        self.require(tag, attribute)
        return attrs[0] if attrs[1] == attribute else attrs[1]

    # -- label vectors ------------------------------------------------------

    def label_vector(self, assignment: dict[str, str]) -> np.ndarray:
        """One-hot-per-tag label vector from a full {tag: attribute} assignment."""
        missing = set(self.tag_names) - set(assignment)
        if missing:
            raise CatalogError(f"assignment missing tags: {sorted(missing)}")
        label = np.zeros(self.n_slots, dtype=np.float32)
        for tag, attr in assignment.items():
            label[self.slot(tag, attr)] = 1.0
        return label

    def check_label(self, label: np.ndarray) -> None:
        label = np.asarray(label)
        if label.shape != (self.n_slots,):
            raise CatalogError(f"label shape {label.shape} != ({self.n_slots},)")
        for tag in self.tags:
            group = label[self.slots_of(tag.name)]
            if not (np.isin(group, (0.0, 1.0)).all() and group.sum() == 1.0):
                raise CatalogError(f"label not one-hot within tag {tag.name!r}")

    def assignment_of(self, label: np.ndarray) -> dict[str, str]:
        self.check_label(label)
        out = {}
        for tag in self.tags:
            idx = int(np.argmax(label[self.slots_of(tag.name)]))
            out[tag.name] = tag.attributes[idx]
        return out

    # -- (de)serialization --------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "tags": [
                {"name": t.name, "attributes": list(t.attributes), "mask_region": t.mask_region}
                for t in self.tags
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TagAttributeCatalog":
        try:
            tags = tuple(
                TagSpec(
                    name=t["name"],
                    attributes=tuple(t["attributes"]),
                    mask_region=t.get("mask_region"),
                )
                for t in d["tags"]
            )
        except (KeyError, TypeError) as exc:
            raise CatalogError(f"malformed catalog: {exc}") from exc
        return cls(tags=tags)
