"""Attribute extraction and grouping for per-attribute evaluation.

Images are grouped by properties of their ground truth (number of salient
objects, relative object scale) or by externally supplied labels from a
sidecar CSV.  Scale bins follow the convention: ratio below 0.1 is small,
above 0.4 is large, boundaries inclusive to medium.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

SCALE_SMALL_BELOW = 0.1
SCALE_LARGE_ABOVE = 0.4

# offsets of the 8-connected neighbourhood
_NEIGHBOURS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass
class AttributeRecord:
    name: str
    object_count: int
    scale_ratio: float
    scale_bin: str
    labels: dict[str, str] = field(default_factory=dict)


def _as_binary(gt: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt)
    if gt.ndim != 2:
        raise ValidationError(f"attribute maps must be 2-D, got shape {gt.shape}")
    values = np.unique(gt)
    if not np.all(np.isin(values, (0.0, 1.0))):
        raise ValidationError("attribute maps must be binary (values 0 and 1)")
    return gt > 0.5


def connected_components(gt: np.ndarray) -> int:
    """Number of 8-connected foreground components; 0 for an empty map."""
    mask = _as_binary(gt)
    h, w = mask.shape
    seen = np.zeros_like(mask)
    count = 0
    for sy, sx in zip(*np.nonzero(mask)):
        if seen[sy, sx]:
            continue
        count += 1
        seen[sy, sx] = True
        queue = deque([(int(sy), int(sx))])
        while queue:
            y, x = queue.popleft()
            for dy, dx in _NEIGHBOURS:
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    queue.append((ny, nx))
    return count


def object_scale(gt: np.ndarray) -> tuple[float, str]:
    """Foreground area ratio and its size bin."""
    mask = _as_binary(gt)
    ratio = float(mask.sum()) / mask.size
    if ratio < SCALE_SMALL_BELOW:
        bin_ = "small"
    elif ratio > SCALE_LARGE_ABOVE:
        bin_ = "large"
    else:
        bin_ = "medium"
    return ratio, bin_


def count_bin(count: int) -> str:
    if count < 0:
        raise ValidationError(f"object count must be non-negative, got {count}")
    if count == 0:
        return "none"
    return "single" if count == 1 else "multiple"


def attribute_record(name: str, gt: np.ndarray, labels: dict[str, str] | None = None) -> AttributeRecord:
    ratio, bin_ = object_scale(gt)
    return AttributeRecord(
        name=name,
        object_count=connected_components(gt),
        scale_ratio=ratio,
        scale_bin=bin_,
        labels=dict(labels or {}),
    )


def read_sidecar(path) -> dict[str, str]:
    """Two-column CSV (stem, label) -> mapping; strict about shape and dupes."""
    out: dict[str, str] = {}
    try:
        with open(path, newline="") as fh:
            for i, row in enumerate(csv.reader(fh), start=1):
                if not row:
                    continue
                if len(row) != 2:
                    raise ValidationError(f"{path}:{i}: expected two columns (stem,label), got {len(row)}")
                stem, label = row[0].strip(), row[1].strip()
                if not stem or not label:
                    raise ValidationError(f"{path}:{i}: empty stem or label")
                if stem in out:
                    raise ValidationError(f"{path}:{i}: duplicate stem {stem!r}")
                out[stem] = label
    except OSError as exc:
        raise ValidationError(f"cannot read sidecar {path}: {exc}") from exc
    return out


def group_label(record: AttributeRecord, attr: str, sidecar: dict[str, str] | None = None) -> str:
    """The group an image falls into under the chosen attribute."""
    if attr == "count":
        return count_bin(record.object_count)
    if attr == "scale":
        return record.scale_bin
    if attr == "sidecar":
        if sidecar is None:
            raise ValidationError("sidecar grouping requested without a sidecar file")
        if record.name not in sidecar:
            raise ValidationError(f"sidecar has no label for image {record.name!r}")
        return sidecar[record.name]
    raise ValidationError(f"unknown attribute {attr!r}, expected count, scale, or sidecar")
