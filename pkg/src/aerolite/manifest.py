"""Run manifests: every artifact-producing command records what it ran with,
so the run can be replayed byte-for-byte."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: list[str]
    config: dict = field(default_factory=dict)
    seed: int = 0
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    outputs: list[str] = field(default_factory=list)
    started: float = 0.0
    elapsed: float = 0.0

    def add_input(self, path: str | Path) -> None:
        self.inputs[str(path)] = file_sha256(path)

    def write(self, out_path: str | Path) -> Path:
        """Write the manifest beside the named output artifact."""
        target = Path(str(out_path) + ".manifest.json")
        target.write_text(json.dumps(self.__dict__, sort_keys=True, indent=2) + "\n")
        return target

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


class Timer:
    def __enter__(self):
        self.t0 = time.monotonic()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.monotonic() - self.t0
