"""Batch files: ``<stem>.csv`` with one draw per row plus a ``<stem>.meta`` sidecar."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .samplers import SampleBatch

MANIFEST = "manifest.json"


class BatchFormatError(Exception):
    pass


def write_batch(batch: SampleBatch, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{batch.id}.csv"
    header = ",".join(f"dim_{j + 1}" for j in range(batch.dim))
    lines = [header]
    lines.extend(",".join(repr(float(v)) for v in row) for row in batch.samples)
    path.write_text("\n".join(lines) + "\n")
    meta = [f"id={batch.id}"]
    if batch.label is not None:
        meta.append(f"label={batch.label}")
    path.with_suffix(".meta").write_text("\n".join(meta) + "\n")
    return path


def read_meta(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise BatchFormatError(f"{path}: malformed metadata line {line!r}")
        out[key.strip()] = value.strip()
    return out


def read_batch(path) -> SampleBatch:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise BatchFormatError(f"{path}: empty file")
    header = lines[0].split(",")
    if header != [f"dim_{j + 1}" for j in range(len(header))]:
        raise BatchFormatError(f"{path}: expected header dim_1,...,dim_p")
    try:
        samples = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:] if ln.strip()])
    except ValueError as e:
        raise BatchFormatError(f"{path}: {e}") from None
    if samples.ndim != 2 or samples.shape[0] == 0 or samples.shape[1] != len(header):
        raise BatchFormatError(f"{path}: rows do not match the {len(header)}-column header")
    meta_path = path.with_suffix(".meta")
    meta = read_meta(meta_path) if meta_path.exists() else {}
    try:
        return SampleBatch(meta.get("id", path.stem), samples, meta.get("label"))
    except ValueError as e:
        raise BatchFormatError(f"{path}: {e}") from None


def write_manifest(directory, batches, scenario: dict | None = None) -> Path:
    directory = Path(directory)
    doc = {"batches": [{"file": f"{b.id}.csv", "id": b.id, "label": b.label, "n": b.n, "dim": b.dim}
                       for b in batches]}
    if scenario is not None:
        doc["scenario"] = scenario
    path = directory / MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def batch_paths(directory) -> list[Path]:
    """Batch files of a directory, in manifest order when a manifest exists."""
    directory = Path(directory)
    man = directory / MANIFEST
    if man.exists():
        doc = json.loads(man.read_text())
        return [directory / e["file"] for e in doc["batches"]]
    return sorted(directory.glob("*.csv"))


def read_directory(directory) -> list[SampleBatch]:
    paths = batch_paths(directory)
    if not paths:
        raise BatchFormatError(f"{directory}: no batch files")
    return [read_batch(p) for p in paths]
