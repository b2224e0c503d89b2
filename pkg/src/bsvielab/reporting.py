"""Run manifests and deterministic CSV emission.

Every output CSV opens with a comment line referencing the manifest by the
hash of its resolved configuration, so a table can always be traced back to
the exact inputs that produced it.  Timings live in the manifest only; the
CSV bytes depend on nothing but the configuration.
"""

from __future__ import annotations

import hashlib
import platform
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

__all__ = ["RunManifest", "config_hash", "write_csv", "write_report"]


def _canonical_lines(config: dict) -> list[str]:
    return [f"{key} = {config[key]!r}" for key in sorted(config)]


def config_hash(config: dict) -> str:
    digest = hashlib.sha256("\n".join(_canonical_lines(config)).encode())
    return digest.hexdigest()


@dataclass
class RunManifest:
    """Full echo of a run's resolved configuration plus timings.

    ``execution`` holds details that do not affect the produced numbers
    (worker counts and the like); they are echoed but excluded from the
    hash, so outputs of equivalent runs reference the same manifest.
    """

    config: dict
    version: str
    wall_clock: float = 0.0
    phase_timings: dict = field(default_factory=dict)
    execution: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.config)

    def lines(self) -> list[str]:
        out = [f"config_sha256 = {self.hash}", f"version = {self.version}"]
        out += _canonical_lines(self.config)
        for key in sorted(self.execution):
            out.append(f"execution.{key} = {self.execution[key]!r}")
        out.append(f"wall_clock_s = {self.wall_clock:.3f}")
        for phase in sorted(self.phase_timings):
            out.append(f"time.{phase}_s = {self.phase_timings[phase]:.3f}")
        out.append(f"platform = {platform.platform()}")
        return out

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.write_text("\n".join(self.lines()) + "\n")
        return path


def write_csv(path: Path, frame: pd.DataFrame, manifest: RunManifest) -> Path:
    """Emit a CSV with the manifest reference as a leading comment line."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# manifest_sha256: {manifest.hash}\n")
        frame.to_csv(fh, index=False)
    return path


def write_report(path: Path, lines: list[str], manifest: RunManifest) -> Path:
    path = Path(path)
    body = [f"# manifest_sha256: {manifest.hash}"] + list(lines)
    path.write_text("\n".join(body) + "\n")
    return path
