"""KITTI-format scene and label I/O, plus the prediction sidecar.

Point clouds are packed little-endian float32 quadruples (x, y, z,
intensity). Label files follow the 15-field KITTI layout with an
optional 16th score field; box centers and yaw are written in the
sensor frame (z at box center), which differs from camera-frame KITTI
labels and is the convention everywhere inside this package. Camera
fields the pipeline does not model (truncation, occlusion, alpha, the
image box) are written as fixed defaults.

Alongside each prediction file a JSON-lines sidecar records every
detection with full double precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Box3D


@dataclass(frozen=True)
class Detection:
    """One scored, classified box."""

    box: Box3D
    score: float
    label: str

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"detection score must be finite, got {self.score}")
        if not self.label:
            raise ValueError("detection label must be non-empty")


def read_points_bin(path) -> np.ndarray:
    """Read a packed float32 cloud; returns (N, 4) float64."""
    raw = Path(path).read_bytes()
    if len(raw) % 16 != 0:
        raise ValueError(f"{path}: byte length {len(raw)} is not a multiple of 16")
    flat = np.frombuffer(raw, dtype="<f4")
    return flat.reshape(-1, 4).astype(np.float64)


def write_points_bin(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ValueError(f"expected (N, 4) points, got {pts.shape}")
    Path(path).write_bytes(pts.astype("<f4").tobytes())


def _kitti_name(label: str) -> str:
    return label.capitalize()


def _format_label_line(label: str, box: Box3D, score: float | None) -> str:
    fields = [
        _kitti_name(label),
        "0.00",  # truncation
        "0",  # occlusion
        "-10.00",  # alpha, unknown
        "0.00",
        "0.00",
        "50.00",
        "50.00",  # image box placeholder
        f"{box.h:.2f}",
        f"{box.w:.2f}",
        f"{box.l:.2f}",
        f"{box.x:.2f}",
        f"{box.y:.2f}",
        f"{box.z:.2f}",
        f"{box.theta:.2f}",
    ]
    if score is not None:
        fields.append(f"{score:.4f}")
    return " ".join(fields)


def parse_label_line(line: str) -> tuple[str, Box3D, float | None]:
    """Parse one label line into (lowercase class, box, optional score)."""
    parts = line.split()
    if len(parts) not in (15, 16):
        raise ValueError(f"label line has {len(parts)} fields, expected 15 or 16: {line!r}")
    name = parts[0].lower()
    h, w, l = (float(v) for v in parts[8:11])
    x, y, z = (float(v) for v in parts[11:14])
    theta = float(parts[14])
    score = float(parts[15]) if len(parts) == 16 else None
    return name, Box3D(x, y, z, h, w, l, theta), score


def read_labels(path) -> list[tuple[str, Box3D]]:
    """Ground-truth boxes from a label file; DontCare entries are skipped."""
    out: list[tuple[str, Box3D]] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if line.split(maxsplit=1)[0].lower() == "dontcare":
            continue
        name, box, _ = parse_label_line(line)
        out.append((name, box))
    return out


def write_labels(path, items: list[tuple[str, Box3D]]) -> None:
    lines = [_format_label_line(name, box, None) for name, box in items]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def write_predictions(path, detections: list[Detection], sidecar_path=None) -> None:
    """Write scored label lines plus a full-precision JSONL sidecar."""
    lines = [_format_label_line(d.label, d.box, d.score) for d in detections]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    if sidecar_path is not None:
        records = []
        for i, d in enumerate(detections):
            records.append(
                json.dumps(
                    {
                        "index": i,
                        "label": d.label,
                        "score": d.score,
                        "box": list(d.box.to_array()),
                    }
                )
            )
        Path(sidecar_path).write_text(
            "\n".join(records) + ("\n" if records else ""), encoding="utf-8"
        )


def read_predictions(path) -> list[Detection]:
    out: list[Detection] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        name, box, score = parse_label_line(line)
        if score is None:
            raise ValueError(f"prediction line is missing a score: {line!r}")
        out.append(Detection(box, score, name))
    return out
