"""Labelled voxel volumes and their on-disk format.

A volume is a text header (``*.hdr``) next to a raw payload (``*.raw``)
holding one unsigned byte per voxel, x varying fastest::

    dims = 64 64 64
    spacing = 0.25 0.25 0.25
    labels = 0:background 1:tooth 2:bone
    byte_order = little
    data_file = scan.raw
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

BACKGROUND, TOOTH, BONE = 0, 1, 2
LABEL_NAMES = {BACKGROUND: "background", TOOTH: "tooth", BONE: "bone"}
MIN_SPACING, MAX_SPACING = 0.05, 2.0


class VolumeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Class labels on a regular grid, indexed ``labels[x, y, z]``.

    Voxel ``(i, j, k)`` has its centre at ``(i*sx, j*sy, k*sz)`` mm.
    """

    labels: np.ndarray
    spacing: tuple

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise VolumeError(f"labels must be 3-D, got shape {lab.shape}")
        lab = lab.astype(np.uint8, copy=True)
        lab.setflags(write=False)
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3:
            raise VolumeError("spacing needs three components")
        if not all(MIN_SPACING <= s <= MAX_SPACING for s in sp):
            raise VolumeError(f"spacing {sp} outside [{MIN_SPACING}, {MAX_SPACING}] mm")
        bad = np.setdiff1d(np.unique(lab), list(LABEL_NAMES))
        if bad.size:
            raise VolumeError(f"unknown label values {bad.tolist()}")
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "spacing", sp)

    @property
    def dims(self):
        return tuple(self.labels.shape)

    def mask(self, label):
        return self.labels == label


def _parse_header(text):
    fields = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise VolumeError(f"malformed header line: {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        fields[k] = v
    for key in ("dims", "spacing", "data_file"):
        if key not in fields:
            raise VolumeError(f"header is missing {key!r}")
    try:
        dims = tuple(int(x) for x in fields["dims"].split())
        spacing = tuple(float(x) for x in fields["spacing"].split())
    except ValueError as exc:
        raise VolumeError(f"malformed header value: {exc}") from None
    if len(dims) != 3 or min(dims) <= 0:
        raise VolumeError(f"bad dims {fields['dims']!r}")
    if fields.get("byte_order", "little") not in ("little", "big"):
        raise VolumeError("byte_order must be little or big")
    if fields.get("order", "x-fastest") != "x-fastest":
        raise VolumeError("only x-fastest ordering is supported")
    if "labels" in fields:
        for item in fields["labels"].split():
            code = item.split(":", 1)[0]
            if not code.isdigit() or int(code) not in LABEL_NAMES:
                raise VolumeError(f"unknown label declaration {item!r}")
    return dims, spacing, fields["data_file"]


def load_volume(path) -> LabelVolume:
    path = Path(path)
    dims, spacing, data_file = _parse_header(path.read_text())
    raw_path = path.parent / data_file
    payload = raw_path.read_bytes()
    expected = dims[0] * dims[1] * dims[2]
    if len(payload) != expected:
        raise VolumeError(f"payload has {len(payload)} bytes, header implies {expected}")
    flat = np.frombuffer(payload, dtype=np.uint8)
    return LabelVolume(flat.reshape(dims, order="F"), spacing)


def save_volume(volume: LabelVolume, path) -> Path:
    """Write ``path`` (header) and a sibling ``.raw`` payload; returns the header path."""
    path = Path(path)
    raw = path.with_suffix(".raw")
    nx, ny, nz = volume.dims
    header = "\n".join([
        f"dims = {nx} {ny} {nz}",
        "spacing = " + " ".join(repr(s) for s in volume.spacing),
        "labels = " + " ".join(f"{k}:{v}" for k, v in LABEL_NAMES.items()),
        "byte_order = little",
        "order = x-fastest",
        f"data_file = {raw.name}",
    ]) + "\n"
    path.write_text(header)
    raw.write_bytes(np.asarray(volume.labels, dtype=np.uint8).tobytes(order="F"))
    return path


def crop_preprocess(slice2d: np.ndarray) -> np.ndarray:
    """Drop the bottom quarter of rows and the right tenth of columns.

    The slice is indexed ``[row, col]`` with row 0 at the top. Retained extent
    is rounded up: ``ceil(3H/4)`` rows and ``ceil(9W/10)`` columns.
    """
    a = np.asarray(slice2d)
    if a.ndim != 2 or a.shape[0] < 8 or a.shape[1] < 8:
        raise VolumeError(f"slice must be at least 8x8, got {a.shape}")
    h, w = a.shape
    return a[: -(-3 * h // 4), : -(-9 * w // 10)].copy()
