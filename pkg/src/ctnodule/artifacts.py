"""Provenance sidecars for pipeline artifacts: every output directory gets a
meta JSON embedding (tool version, config hash, seed) so downstream commands
can refuse mismatched inputs."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import __version__
from .errors import MissingArtifact, VersionMismatch


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def write_meta(path, cfg_hash: str, seed: int, extra: dict | None = None) -> None:
    doc = {"tool_version": __version__, "config_hash": cfg_hash, "seed": seed}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def read_meta(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(str(path))
    return json.loads(path.read_text())


def check_meta(meta: dict, cfg_hash: str, source: str) -> None:
    if meta.get("config_hash") != cfg_hash:
        raise VersionMismatch(
            f"{source}: config hash {meta.get('config_hash')} != current {cfg_hash}"
        )
