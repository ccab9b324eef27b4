"""Dataset split semantics: which (location pool, years) each subset draws from.

Splits are disjoint on (location, target-period) pairs: ood-t shares
locations with train but not years, ood-s shares years but not locations,
ood-st shares neither, and val is a held-out year at train locations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import ContractViolationError

SPLIT_TAGS = ("train", "val", "ood-t", "ood-s", "ood-st")


@dataclass
class SplitSpec:
    """Per-split (location pool, years) assignment.

    ``pools`` maps split tag -> location pool name ("core" holds the training
    locations, "held" the spatially held-out ones), ``years`` maps split tag
    -> tuple of admissible target years.
    """

    years: dict[str, tuple[int, ...]] = field(
        default_factory=lambda: {
            "train": (2018, 2019),
            "val": (2020,),
            "ood-t": (2021,),
            "ood-s": (2018, 2019),
            "ood-st": (2021,),
        }
    )
    pools: dict[str, str] = field(
        default_factory=lambda: {
            "train": "core",
            "val": "core",
            "ood-t": "core",
            "ood-s": "held",
            "ood-st": "held",
        }
    )

    def validate(self) -> None:
        """Reject any two splits sharing a (location pool, year) pair."""
        tags = list(self.years)
        if set(tags) != set(self.pools):
            raise ContractViolationError("years and pools list different splits")
        for tag in tags:
            if tag not in SPLIT_TAGS:
                raise ContractViolationError(f"unknown split tag {tag!r}")
        for i, a in enumerate(tags):
            for b in tags[i + 1 :]:
                if self.pools[a] != self.pools[b]:
                    continue
                shared = set(self.years[a]) & set(self.years[b])
                if shared:
                    raise ContractViolationError(
                        f"splits {a!r} and {b!r} overlap on pool "
                        f"{self.pools[a]!r}, years {sorted(shared)}"
                    )

    def to_dict(self) -> dict:
        return {
            "years": {k: list(v) for k, v in self.years.items()},
            "pools": dict(self.pools),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        spec = cls(
            years={k: tuple(v) for k, v in d["years"].items()},
            pools=dict(d["pools"]),
        )
        spec.validate()
        return spec
