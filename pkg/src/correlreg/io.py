"""Image, landmark and transform file formats."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image as PILImage

from .image import Image, ImageError


def load_image(path, pixel_size: Optional[float] = None) -> Image:
    """Read PNG/PGM/PPM and normalize intensities to ``[0, 1]`` by bit depth."""
    with PILImage.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            scale = 65535.0
        elif im.mode == "F":
            arr = np.asarray(im, dtype=np.float64)
            scale = 1.0
        else:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
            arr = np.asarray(im, dtype=np.float64)
            scale = 255.0
    data = np.clip(arr / scale, 0.0, 1.0)
    return Image(data, pixel_size)


def save_image(img, path, bits: int = 8) -> None:
    """Write an image clamped to ``[0, 1]``; 16-bit output only for single-channel."""
    data = img.data if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    data = np.clip(data, 0.0, 1.0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if bits == 16:
        if data.ndim != 2:
            raise ImageError("16-bit export supports single-channel images only")
        arr = np.round(data * 65535.0).astype(np.uint16)
        PILImage.fromarray(arr).save(path)
    elif bits == 8:
        arr = np.round(data * 255.0).astype(np.uint8)
        PILImage.fromarray(arr).save(path)
    else:
        raise ImageError("bits must be 8 or 16")


def save_raw(data, path) -> None:
    """Little-endian float64 dump; shape goes to a ``.json`` sidecar."""
    arr = np.ascontiguousarray(np.asarray(data, dtype="<f8"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(arr.tobytes())
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps({"dtype": "<f8", "shape": list(arr.shape)}) + "\n")


def load_raw(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return np.frombuffer(path.read_bytes(), dtype=meta["dtype"]).reshape(meta["shape"]).copy()


def write_landmarks_csv(points, path) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y"])
        for i, (x, y) in enumerate(points):
            w.writerow([i, repr(float(x)), repr(float(y))])


def read_landmarks_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "x", "y"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: landmark CSV needs an 'id,x,y' header")
        rows = sorted(reader, key=lambda r: int(r["id"]))
    return np.array([[float(r["x"]), float(r["y"])] for r in rows], dtype=np.float64).reshape(-1, 2)


def read_landmark_pairs_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``id,src_x,src_y,tgt_x,tgt_y`` rows."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"id", "src_x", "src_y", "tgt_x", "tgt_y"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValueError(f"{path}: pair CSV needs header {','.join(sorted(need))}")
        rows = sorted(reader, key=lambda r: int(r["id"]))
    src = np.array([[float(r["src_x"]), float(r["src_y"])] for r in rows]).reshape(-1, 2)
    tgt = np.array([[float(r["tgt_x"]), float(r["tgt_y"])] for r in rows]).reshape(-1, 2)
    return src, tgt


def write_landmark_pairs_csv(src, tgt, path) -> None:
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    tgt = np.asarray(tgt, dtype=np.float64).reshape(-1, 2)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "src_x", "src_y", "tgt_x", "tgt_y"])
        for i, (s, t) in enumerate(zip(src, tgt)):
            w.writerow([i, repr(float(s[0])), repr(float(s[1])), repr(float(t[0])), repr(float(t[1]))])


def write_json(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
