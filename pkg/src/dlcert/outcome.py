"""Result container shared by every test in the harness."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional


@dataclass(frozen=True)
class TestOutcome:
    """Pass/fail decision plus the numbers that led to it.

    ``statistics`` holds named reals; ``details`` holds anything that is not
    a single number (index lists, messages).  A skipped test never passes.
    """

    __test__ = False  # keep pytest from collecting this class

    name: str
    passed: bool
    statistics: dict[str, float]
    subgroup: Optional[dict[str, Any]] = None
    details: dict[str, Any] = field(default_factory=dict)
    skipped: bool = False

    def __bool__(self) -> bool:
        return self.passed

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "name": self.name,
            "passed": self.passed,
            "skipped": self.skipped,
            "statistics": {k: _jsonable(v) for k, v in self.statistics.items()},
        }
        if self.subgroup is not None:
            out["subgroup"] = {k: _jsonable(v) for k, v in self.subgroup.items()}
        if self.details:
            out["details"] = {k: _jsonable(v) for k, v in self.details.items()}
        return out


def skipped(name: str, reason: str) -> TestOutcome:
    return TestOutcome(name, False, {"skipped": 1.0}, details={"reason": reason}, skipped=True)


def _jsonable(value):
    import numpy as np

    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, float) and value != value:
        return None
    return value
