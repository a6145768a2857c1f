"""
Run Manifest Module
JSON manifests recording how every output file of a run was produced.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

LAB_VERSION = "1.0.0"


def to_jsonable(value: Any) -> Any:
    """Plain JSON types; numpy values become lists/floats and NaN/inf become None"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(data: dict, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(data), f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")
    return path


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    """
    Record of one command run. Everything except wall_clock is a function of
    the command and its parameters, so two identical runs hash identically.
    """
    command: str
    parameters: dict
    seed: int
    outputs: list = field(default_factory=list)
    diagnostics: Optional[dict] = None
    wall_clock: Optional[float] = None
    version: str = LAB_VERSION

    def add_output(self, path) -> None:
        self.outputs.append(Path(path))

    def reproducible_part(self) -> dict:
        return {
            "command": self.command,
            "parameters": self.parameters,
            "seed": self.seed,
            "version": self.version,
            "outputs": [p.name for p in self.outputs],
            "outputs_sha256": {p.name: file_sha256(p) for p in self.outputs if p.exists()},
            "diagnostics": self.diagnostics,
        }

    def fingerprint(self) -> str:
        payload = json.dumps(to_jsonable(self.reproducible_part()), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def save(self, out_dir) -> Path:
        data = self.reproducible_part()
        data["fingerprint"] = self.fingerprint()
        data["wall_clock_seconds"] = self.wall_clock
        path = write_json(data, Path(out_dir) / "manifest.json")
        print(f"📄 Manifest written: {path}")
        return path


def load_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
