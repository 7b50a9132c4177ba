"""Stage manifests and the output-directory lock.

A manifest records what a stage read and wrote (by content hash), the
configuration it ran with and the library versions. It carries no
timestamps, so rerunning a stage on unchanged inputs rewrites the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
from collections.abc import Iterable, Mapping
from pathlib import Path

import matplotlib
import numpy as np

from . import __version__

MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".mobility-ad.lock"


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def versions() -> dict[str, str]:
    return {
        "mobility_ad": __version__,
        "numpy": np.__version__,
        "matplotlib": matplotlib.__version__,
        "python": platform.python_version(),
    }


def _display(path: Path, root: Path) -> str:
    try:
        return path.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return str(path)


def write_manifest(
    stage_dir: str | Path,
    stage: str,
    root: str | Path,
    inputs: Mapping[str, str | Path],
    outputs: Iterable[str | Path],
    config: Mapping,
    extra: Mapping | None = None,
) -> Path:
    """Write ``manifest.json`` into ``stage_dir``.

    Paths under ``root`` (the run's output directory) are recorded relative
    to it, so two runs into different directories produce equal manifests.
    """
    root = Path(root)
    doc = {
        "stage": stage,
        "inputs": {
            name: {"path": _display(Path(p), root), "sha256": sha256_file(p)} for name, p in sorted(inputs.items())
        },
        "outputs": {
            _display(Path(p), root): sha256_file(p) for p in sorted(Path(p) for p in outputs)
        },
        "config": dict(config),
        "versions": versions(),
    }
    if extra:
        doc.update(extra)
    path = Path(stage_dir) / MANIFEST_NAME
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def read_manifest(stage_dir: str | Path) -> dict:
    return json.loads((Path(stage_dir) / MANIFEST_NAME).read_text(encoding="utf-8"))


class LockHeldError(RuntimeError):
    """Another invocation holds the output directory."""


class OutputLock:
    """Exclusive lock on an output directory, held for one command."""

    def __init__(self, out_dir: str | Path):
        self.path = Path(out_dir) / LOCK_NAME

    def __enter__(self) -> OutputLock:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
        except FileExistsError:
            raise LockHeldError(
                f"{self.path} exists: another run is using this output directory "
                "(delete the file if no run is active)"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc) -> None:
        self.path.unlink(missing_ok=True)
