"""Class labels: countable *thing* categories and amorphous *stuff* categories."""
from __future__ import annotations

from dataclasses import dataclass

THING = "thing"
STUFF = "stuff"
KINDS = (THING, STUFF)


@dataclass(frozen=True)
class Label:
    id: str
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"label kind must be one of {KINDS}, got {self.kind!r}")
        if not self.id:
            raise ValueError("label id must be non-empty")

    @property
    def is_thing(self) -> bool:
        return self.kind == THING

    @property
    def is_stuff(self) -> bool:
        return self.kind == STUFF
