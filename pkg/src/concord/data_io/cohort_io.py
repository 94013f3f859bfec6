"""Cohort tables on disk: records, features and cell fractions as CSV, patch
embeddings as newline-delimited JSON."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Optional

import numpy as np

from ..attention import EmbeddingBag
from ..errors import AlignmentError, ParseError
from ..survival_stats import SurvivalRecord
from .synthetic import CELL_TYPES, CohortBundle

RECORDS_FILE = "records.csv"
FEATURES_FILE = "features.csv"
BAGS_FILE = "bags.ndjson"
CELLS_FILE = "cells.csv"
MANIFEST_FILE = "manifest.json"
COHORT_FILES = (RECORDS_FILE, FEATURES_FILE, BAGS_FILE, CELLS_FILE)

MUTATION_PREFIX = "mut_"


def _fmt(x: float) -> str:
    # repr round-trips doubles exactly
    return repr(float(x))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _read_csv(path: Path, required: tuple) -> tuple[list, list]:
    if not path.exists():
        raise FileNotFoundError(f"missing cohort file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    for col in required:
        if col not in header:
            raise ParseError(f"{path}: line 1: missing column {col!r}")
    body = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        body.append((lineno, row))
    return header, body


def _float(path, lineno, field, text) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{path}: line {lineno}: field {field!r}: not a number: {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(f"{path}: line {lineno}: field {field!r}: non-finite value {text!r}")
    return value


def _event(path, lineno, text) -> bool:
    t = text.strip().lower()
    if t in ("1", "true"):
        return True
    if t in ("0", "false"):
        return False
    raise ParseError(f"{path}: line {lineno}: field 'event': expected 0/1, got {text!r}")


# ---------------------------------------------------------------------------
# readers


def read_records(path) -> tuple[list[SurvivalRecord], Optional[list[str]]]:
    """Records and, when a ``site`` column is present, site labels."""
    path = Path(path)
    header, body = _read_csv(path, ("patient_id", "time", "event"))
    col = {h: i for i, h in enumerate(header)}
    records, sites, seen = [], [], set()
    for lineno, row in body:
        pid = row[col["patient_id"]].strip()
        if not pid:
            raise ParseError(f"{path}: line {lineno}: field 'patient_id': empty")
        if pid in seen:
            raise ParseError(f"{path}: line {lineno}: duplicate patient_id {pid!r}")
        seen.add(pid)
        time = _float(path, lineno, "time", row[col["time"]])
        try:
            records.append(SurvivalRecord(pid, time, _event(path, lineno, row[col["event"]])))
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: field 'time': {exc}") from None
        if "site" in col:
            sites.append(row[col["site"]].strip())
    return records, (sites if "site" in col else None)


def read_features(path) -> tuple[list[str], tuple[str, ...], np.ndarray]:
    """Patient ids, feature names and the matrix; ``mut_`` columns must be 0/1."""
    path = Path(path)
    header, body = _read_csv(path, ("patient_id",))
    if header[0] != "patient_id":
        raise ParseError(f"{path}: line 1: first column must be 'patient_id'")
    names = tuple(header[1:])
    if len(set(names)) != len(names):
        raise ParseError(f"{path}: line 1: duplicate feature names")
    ids, rows = [], []
    for lineno, row in body:
        ids.append(row[0].strip())
        values = []
        for name, text in zip(names, row[1:]):
            v = _float(path, lineno, name, text)
            if name.startswith(MUTATION_PREFIX) and v not in (0.0, 1.0):
                raise ParseError(f"{path}: line {lineno}: field {name!r}: mutation status must be 0 or 1, got {text!r}")
            values.append(v)
        rows.append(values)
    X = np.array(rows, dtype=float).reshape(len(rows), len(names))
    return ids, names, X


def read_bags(path) -> list[EmbeddingBag]:
    """Bags in first-appearance order of patient ids; one patch per line."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing cohort file: {path}")
    patches: dict = {}
    d_in = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: invalid JSON: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise ParseError(f"{path}: line {lineno}: expected an object")
            for key in ("patient_id", "patch_id", "vector"):
                if key not in obj:
                    raise ParseError(f"{path}: line {lineno}: missing field {key!r}")
            vec = obj["vector"]
            if not isinstance(vec, list) or not vec or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vec):
                raise ParseError(f"{path}: line {lineno}: field 'vector': expected a list of numbers")
            if d_in is None:
                d_in = len(vec)
            elif len(vec) != d_in:
                raise ParseError(f"{path}: line {lineno}: field 'vector': length {len(vec)}, expected {d_in}")
            has_xy = "x" in obj or "y" in obj
            if has_xy and not all(isinstance(obj.get(k), int) for k in ("x", "y")):
                raise ParseError(f"{path}: line {lineno}: fields 'x'/'y' must both be integers")
            xy = (obj["x"], obj["y"]) if has_xy else None
            patches.setdefault(str(obj["patient_id"]), []).append((str(obj["patch_id"]), xy, vec, lineno))
    bags = []
    for pid, items in patches.items():
        with_xy = [xy is not None for _, xy, _, _ in items]
        if any(with_xy) and not all(with_xy):
            raise ParseError(f"{path}: line {items[0][3]}: patient {pid!r} mixes patches with and without coordinates")
        coords = np.array([xy for _, xy, _, _ in items]) if all(with_xy) else None
        try:
            bags.append(EmbeddingBag(pid, tuple(p for p, _, _, _ in items), np.array([v for _, _, v, _ in items]), coords))
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}") from None
    return bags


def read_cells(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    header, body = _read_csv(path, ("patient_id",) + CELL_TYPES)
    col = {h: i for i, h in enumerate(header)}
    ids, rows = [], []
    for lineno, row in body:
        ids.append(row[col["patient_id"]].strip())
        fr = [_float(path, lineno, c, row[col[c]]) for c in CELL_TYPES]
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-6:
            raise ParseError(f"{path}: line {lineno}: cell fractions must be non-negative and sum to 1")
        rows.append(fr)
    return ids, np.array(rows, dtype=float).reshape(len(rows), len(CELL_TYPES))


def _align(section: str, ids: list, reference: list) -> list[int]:
    """Row order of ``ids`` matching ``reference``; raises on any mismatch."""
    pos = {}
    for i, pid in enumerate(ids):
        if pid in pos:
            raise AlignmentError(f"{section}: duplicate patient_id {pid!r}")
        pos[pid] = i
    ref = set(reference)
    for pid in ids:
        if pid not in ref:
            raise AlignmentError(f"{section}: unknown patient_id {pid!r}")
    for pid in reference:
        if pid not in pos:
            raise AlignmentError(f"{section}: no entry for patient_id {pid!r}")
    return [pos[pid] for pid in reference]


def read_cohort(path, bags_path=None, cells: Optional[bool] = None) -> CohortBundle:
    """Read a cohort directory; sections are re-ordered to follow records.csv.

    ``cells.csv`` is optional and read when present unless ``cells=False``.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"cohort directory not found: {root}")
    records, sites = read_records(root / RECORDS_FILE)
    ids = [r.patient_id for r in records]

    f_ids, names, X = read_features(root / FEATURES_FILE)
    X = X[_align(FEATURES_FILE, f_ids, ids)]

    bags = read_bags(Path(bags_path) if bags_path else root / BAGS_FILE)
    bag_order = _align(BAGS_FILE, [b.patient_id for b in bags], ids)
    bags = [bags[i] for i in bag_order]

    table = None
    cells_path = root / CELLS_FILE
    if cells is not False and cells_path.exists():
        c_ids, table = read_cells(cells_path)
        table = table[_align(CELLS_FILE, c_ids, ids)]
    elif cells:
        raise FileNotFoundError(f"missing cohort file: {cells_path}")

    metadata = {}
    manifest = root / MANIFEST_FILE
    if manifest.exists():
        try:
            metadata = json.loads(manifest.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{manifest}: invalid JSON: {exc.msg}") from None
    return CohortBundle(records, names, X, bags, sites, table, metadata)


# ---------------------------------------------------------------------------
# writers


def write_records(path, records, sites=None) -> None:
    header = ["patient_id", "time", "event"] + (["site"] if sites is not None else [])
    rows = []
    for i, r in enumerate(records):
        row = [r.patient_id, _fmt(r.time), "1" if r.event else "0"]
        if sites is not None:
            row.append(sites[i])
        rows.append(row)
    _write_csv(Path(path), header, rows)


def write_features(path, ids, names, X) -> None:
    names = list(names)
    rows = []
    for pid, row in zip(ids, np.asarray(X, dtype=float)):
        rows.append([pid] + [
            str(int(v)) if n.startswith(MUTATION_PREFIX) else _fmt(v) for n, v in zip(names, row)
        ])
    _write_csv(Path(path), ["patient_id"] + names, rows)


def write_bags(path, bags) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for bag in bags:
            for j, pid in enumerate(bag.patch_ids):
                obj = {"patient_id": bag.patient_id, "patch_id": pid}
                if bag.coords is not None:
                    obj["x"], obj["y"] = int(bag.coords[j, 0]), int(bag.coords[j, 1])
                obj["vector"] = [float(v) for v in bag.vectors[j]]
                fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def write_cells(path, ids, table) -> None:
    rows = [[pid] + [_fmt(v) for v in row] for pid, row in zip(ids, np.asarray(table))]
    _write_csv(Path(path), ["patient_id"] + list(CELL_TYPES), rows)


def write_cohort(path, bundle: CohortBundle, manifest: Optional[dict] = None) -> list[Path]:
    """Write the cohort files (plus ``manifest.json`` when given); returns the paths."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    ids = bundle.patient_ids
    written = [root / RECORDS_FILE, root / FEATURES_FILE, root / BAGS_FILE]
    write_records(written[0], bundle.records, bundle.sites)
    write_features(written[1], ids, bundle.feature_names, bundle.features)
    write_bags(written[2], bundle.bags)
    if bundle.cells is not None:
        written.append(root / CELLS_FILE)
        write_cells(written[-1], ids, bundle.cells)
    if manifest is not None:
        written.append(root / MANIFEST_FILE)
        written[-1].write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return written
