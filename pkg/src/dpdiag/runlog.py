"""In-memory run log: a manifest plus the ordered per-step snapshots."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Union

from dpdiag.metrics import StepSnapshot

LOG_SCHEMA_VERSION = 1
EXTERNAL = "external"


@dataclass(eq=False)
class RunManifest:
    run_id: str
    world_size: int
    config: Union[dict[str, Any], str] = EXTERNAL
    flattening: Optional[list] = None
    prng: Optional[str] = None
    created: Optional[str] = None
    schema_version: int = LOG_SCHEMA_VERSION

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": "manifest",
            "schema_version": self.schema_version,
            "run_id": self.run_id,
            "world_size": self.world_size,
            "config": self.config,
            "flattening": self.flattening,
            "prng": self.prng,
            "created": self.created,
        }


@dataclass(eq=False)
class RunLog:
    manifest: RunManifest
    snapshots: list[StepSnapshot] = field(default_factory=list)
    # steps present in the source with missing rank cells
    gaps: list[int] = field(default_factory=list)

    @property
    def run_id(self) -> str:
        return self.manifest.run_id

    @property
    def world_size(self) -> int:
        return self.manifest.world_size
