"""Run manifests: config snapshot plus content hashes of inputs and outputs."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path


@dataclass
class RunManifest:
    run_id: str
    command: str
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    wall_s: float = 0.0


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def build_manifest(command: str, config: dict, inputs: list[str | Path], outputs: list[str | Path], wall_s: float = 0.0) -> RunManifest:
    input_hashes = {str(p): file_sha256(p) for p in inputs}
    ident = hashlib.sha256(
        json.dumps({"command": command, "config": config, "inputs": input_hashes}, sort_keys=True).encode()
    ).hexdigest()[:12]
    return RunManifest(
        run_id=ident,
        command=command,
        config=config,
        inputs=input_hashes,
        outputs={str(p): file_sha256(p) for p in outputs},
        wall_s=wall_s,
    )


def write_manifest(path: str | Path, manifest: RunManifest) -> None:
    Path(path).write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> RunManifest:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return RunManifest(**data)


def verify_manifest(path: str | Path) -> list[str]:
    """Recompute all recorded hashes; return a list of mismatch descriptions."""
    manifest = read_manifest(path)
    problems = []
    for kind, table in (("input", manifest.inputs), ("output", manifest.outputs)):
        for file_path, digest in table.items():
            if not Path(file_path).exists():
                problems.append(f"{kind} {file_path}: missing")
            elif file_sha256(file_path) != digest:
                problems.append(f"{kind} {file_path}: hash mismatch")
    return problems
