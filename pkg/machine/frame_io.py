# machine/frame_io.py
"""PGM frame files and sequence manifests.

Frames are 8-bit binary PGM (P5, maxval 255) written through Pillow. A sequence
directory holds ``frame_00000.pgm``..., matching ``mask_00000.pgm`` files and a
``manifest.json`` recording the plan, the frame spec, the seed and per-frame
labels.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from machine.sewer_spec import (
    Frame,
    FrameSpec,
    PathLike,
    SegmentPlan,
    SewerFormatError,
    ShapeError,
    read_json,
    write_json,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


def to_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: PathLike, values: np.ndarray) -> Path:
    """Write a [0, 1] grid as a P5 PGM file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_u8(values)).save(path, format="PPM")
    return path


def read_pgm(path: PathLike) -> np.ndarray:
    """Read a PGM file back to a float64 grid in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as image:
            if image.format != "PPM" or image.mode not in ("L", "1"):
                raise SewerFormatError(path, f"expected grayscale PGM, got {image.format} {image.mode}")
            data = np.asarray(image.convert("L"), dtype=np.float64)
    except UnidentifiedImageError as exc:
        raise SewerFormatError(path, "not a PGM image") from exc
    return data / 255.0


def write_overlay(path: PathLike, frame: Frame, heat: np.ndarray, alpha: float = 0.5) -> Path:
    """Blend a heatmap (normalized to its own maximum) over the frame."""
    heat = np.asarray(heat, dtype=np.float64)
    if heat.shape != frame.pixels.shape:
        raise ShapeError(f"Overlay heatmap shape {heat.shape} differs from frame {frame.pixels.shape}")
    peak = float(heat.max()) if heat.size else 0.0
    normalised = heat / peak if peak > 0 else np.zeros_like(heat)
    blended = (1.0 - alpha) * frame.pixels + alpha * normalised
    return write_pgm(path, blended)


def frame_filename(index: int) -> str:
    return f"frame_{index:05d}.pgm"


def mask_filename(index: int) -> str:
    return f"mask_{index:05d}.pgm"


def write_sequence(
    directory: PathLike,
    frames: Sequence[Frame],
    spec: FrameSpec,
    plan: SegmentPlan,
    seed: int,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write frames, masks and a JSON manifest into *directory*."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries: List[Dict[str, Any]] = []
    for index, frame in enumerate(frames):
        write_pgm(directory / frame_filename(index), frame.pixels)
        entry: Dict[str, Any] = {"index": index, "file": frame_filename(index), "label": int(frame.label)}
        if frame.mask is not None:
            write_pgm(directory / mask_filename(index), frame.mask.astype(np.float64))
            entry["mask"] = mask_filename(index)
        entries.append(entry)
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": int(seed),
        "spec": spec.to_dict(),
        "plan": plan.to_dict(),
        "frames": entries,
    }
    if extra:
        manifest["extra"] = extra
    path = write_json(directory / MANIFEST_NAME, manifest)
    logger.info("Wrote %d frames and manifest to %s", len(entries), directory)
    return path


def read_sequence(directory: PathLike) -> Tuple[List[Frame], Dict[str, Any]]:
    """Load a sequence directory; returns frames in manifest order and the manifest."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"No {MANIFEST_NAME} in {directory}")
    manifest = read_json(manifest_path)
    if manifest.get("version") != MANIFEST_VERSION:
        raise SewerFormatError(manifest_path, f"unsupported manifest version {manifest.get('version')}")
    frames = []
    try:
        for entry in manifest["frames"]:
            pixels = read_pgm(directory / entry["file"])
            mask = read_pgm(directory / entry["mask"]) >= 0.5 if "mask" in entry else None
            frames.append(Frame(pixels=pixels, label=int(entry["label"]), mask=mask))
    except KeyError as exc:
        raise SewerFormatError(manifest_path, f"frame entry missing {exc}") from exc
    logger.info("Loaded %d frames from %s", len(frames), directory)
    return frames, manifest
