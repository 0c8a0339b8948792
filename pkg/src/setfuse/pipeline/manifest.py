"""Run manifests: everything needed to replay a run bit-compatibly.

Wall-clock numbers live under the ``timings`` key; all other content is
deterministic for a fixed (config, seed, backend) triple.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

MANIFEST_NAME = "manifest.json"
FAILURE_MARKER = "FAILED"


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    mode: str
    config: dict
    graph: dict = field(default_factory=dict)
    prompts: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    loss_trace: list[dict] = field(default_factory=list)
    stage_trace: list[dict] = field(default_factory=list)
    outputs: list[dict] = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def warn(self, message: str) -> None:
        if message not in self.warnings:
            self.warnings.append(message)

    def record_output(self, path: str | Path) -> None:
        self.outputs.append({"file": Path(path).name, "sha256": file_sha256(path)})

    def to_dict(self) -> dict:
        return {
            "format": 1,
            "mode": self.mode,
            "config": self.config,
            "graph": self.graph,
            "prompts": self.prompts,
            "versions": self.versions,
            "warnings": self.warnings,
            "loss_trace": self.loss_trace,
            "stage_trace": self.stage_trace,
            "outputs": self.outputs,
            "timings": self.timings,
        }

    def write(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return path

    @staticmethod
    def read(out_dir: str | Path) -> dict:
        return json.loads((Path(out_dir) / MANIFEST_NAME).read_text(encoding="utf-8"))


def write_failure_marker(out_dir: str | Path, stage: str, error: BaseException) -> None:
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / FAILURE_MARKER).write_text(
        f"stage: {stage}\nerror: {error}\n", encoding="utf-8"
    )
