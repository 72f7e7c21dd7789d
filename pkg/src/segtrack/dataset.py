"""Sequence datasets on disk: frames, ground truth, prediction files and masks.

Layout of one sequence directory::

    frames/00000.png ...      frame images, processed in file-name order
    groundtruth.txt           optional, one region per line (4 or 8 numbers)
    masks/00000.png ...       optional, one mask per frame (nonzero = target)

Coordinates are continuous image coordinates with pixel centers at integers,
x to the right and y down.  A 4-number line is ``x,y,w,h`` (top-left corner
and size); an 8-number line lists the corners of a rotated rectangle.

Prediction box files hold one line per frame: 8 numbers with 6 decimals, or a
single status code from the reset protocol (``1`` initialization, ``2``
failure, ``0`` frame skipped after a failure).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import RotatedBox

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
GROUNDTRUTH_FILE = "groundtruth.txt"
BOXES_FILE = "boxes.txt"
CODE_INIT, CODE_FAILURE, CODE_SKIP = 1, 2, 0


class DatasetError(ValueError):
    """Malformed ground truth or inconsistent sequence layout."""


# ---------------------------------------------------------------------------
# box text files


def parse_region(text: str, where="") -> RotatedBox:
    try:
        vals = [float(v) for v in text.replace("\t", ",").replace(" ", ",").split(",") if v != ""]
    except ValueError as exc:
        raise DatasetError(f"{where}: not a list of numbers: {text.strip()!r}") from exc
    if not all(math.isfinite(v) for v in vals):
        raise DatasetError(f"{where}: non-finite value in {text.strip()!r}")
    if len(vals) == 4:
        x, y, w, h = vals
        if w <= 0 or h <= 0:
            raise DatasetError(f"{where}: non-positive box size in {text.strip()!r}")
        return RotatedBox.from_xywh(x, y, w, h)
    if len(vals) == 8:
        return RotatedBox.from_polygon(np.array(vals).reshape(4, 2))
    raise DatasetError(f"{where}: expected 4 or 8 numbers, got {len(vals)}")


def read_groundtruth(path) -> list:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise DatasetError(f"{path}: empty ground-truth file")
    return [parse_region(ln, f"{path}:{i + 1}") for i, ln in enumerate(lines)]


def format_box(box: RotatedBox) -> str:
    return ",".join(f"{v:.6f}" for v in box.corners().ravel())


def write_boxes(path, records) -> None:
    """Write boxes or integer status codes, one line per frame."""
    lines = [str(int(r)) if isinstance(r, (int, np.integer)) else format_box(r) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_boxes(path) -> list:
    """Prediction file entries: :class:`RotatedBox` or an int status code."""
    path = Path(path)
    out = []
    for i, ln in enumerate(path.read_text().splitlines()):
        s = ln.strip()
        if not s:
            continue
        if s in ("0", "1", "2"):
            out.append(int(s))
        else:
            out.append(parse_region(s, f"{path}:{i + 1}"))
    return out


# ---------------------------------------------------------------------------
# images


def read_image(path) -> np.ndarray:
    """(H, W, 3) uint8."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_mask(path) -> np.ndarray:
    """Boolean mask: any nonzero value (or palette index) is target."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    return arr.any(axis=-1) if arr.ndim == 3 else arr > 0


def write_mask(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8), mode="L").save(path)


def write_image(path, image) -> None:
    Image.fromarray(np.asarray(image, np.uint8)).save(path)


def overlay(frame, mask=None, box=None, color=(255, 0, 0)) -> np.ndarray:
    """Frame with the mask tinted and the box outline drawn."""
    img = np.asarray(frame, np.float64).copy()
    if mask is not None:
        m = np.asarray(mask, bool)
        img[m] = 0.5 * img[m] + 0.5 * np.array(color)
    out = Image.fromarray(np.clip(img, 0, 255).astype(np.uint8))
    if box is not None:
        from PIL import ImageDraw

        pts = [tuple(p) for p in box.corners()]
        ImageDraw.Draw(out).line(pts + [pts[0]], fill=(255, 255, 0), width=1)
    return np.asarray(out)


def _images(directory: Path) -> list:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# ---------------------------------------------------------------------------
# sequences


class FrameList:
    """Lazily loaded frames, indexable like a list."""

    def __init__(self, files):
        self.files = list(files)

    def __len__(self):
        return len(self.files)

    def __getitem__(self, i):
        return read_image(self.files[i])


@dataclass
class SequenceDataset:
    root: Path
    frame_files: list
    boxes: list = None  # RotatedBox per frame (or only the first)
    mask_files: list = None
    format: str = "box"  # "box" | "polygon" | "mask"
    first_frame_only: bool = False

    @property
    def name(self) -> str:
        return self.root.name

    def __len__(self):
        return len(self.frame_files)

    def frames(self) -> FrameList:
        return FrameList(self.frame_files)

    def masks(self) -> list:
        if self.mask_files is None:
            raise DatasetError(f"{self.root}: no masks/ directory")
        return [read_mask(p) for p in self.mask_files]

    def initial_region(self):
        """Mask if available, otherwise the first ground-truth box."""
        if self.mask_files is not None:
            return read_mask(self.mask_files[0])
        return self.boxes[0]

    def box_ground_truth(self) -> list:
        """One box per frame; derived from the masks when there is no box file."""
        if self.boxes is not None:
            if self.first_frame_only:
                raise DatasetError(f"{self.root}: ground truth covers the first frame only")
            return self.boxes
        from .synthetic import mask_box

        out = []
        for p in self.mask_files:
            m = read_mask(p)
            out.append(mask_box(m) if m.any() else RotatedBox(0.0, 0.0, 0.0, 0.0, 0.0))
        return out


def load_sequence(root) -> SequenceDataset:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"sequence directory not found: {root}")
    frame_dir = root / "frames"
    frame_files = _images(frame_dir if frame_dir.is_dir() else root)
    if not frame_files:
        raise FileNotFoundError(f"{root}: no frame images")
    gt_path, mask_dir = root / GROUNDTRUTH_FILE, root / "masks"
    if not gt_path.exists() and not mask_dir.is_dir():
        raise FileNotFoundError(f"{root}: neither {GROUNDTRUTH_FILE} nor masks/ found")
    seq = SequenceDataset(root, frame_files)
    if gt_path.exists():
        seq.boxes = read_groundtruth(gt_path)
        first = [v for v in gt_path.read_text().splitlines() if v.strip()][0]
        seq.format = "polygon" if len(first.replace(" ", ",").split(",")) == 8 else "box"
        if len(seq.boxes) == 1 and len(frame_files) > 1:
            seq.first_frame_only = True
        elif len(seq.boxes) != len(frame_files):
            raise DatasetError(f"{gt_path}: {len(seq.boxes)} records for {len(frame_files)} frames")
    if mask_dir.is_dir():
        seq.mask_files = _images(mask_dir)
        if len(seq.mask_files) != len(frame_files):
            raise DatasetError(f"{mask_dir}: {len(seq.mask_files)} masks for {len(frame_files)} frames")
        if seq.boxes is None:
            seq.format = "mask"
    return seq


def load_dataset(root) -> list:
    """All sequences below ``root`` (or ``root`` itself if it is a sequence)."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    if (root / "frames").is_dir() or (root / GROUNDTRUTH_FILE).exists():
        return [load_sequence(root)]
    seqs = [load_sequence(p) for p in sorted(root.iterdir()) if p.is_dir()]
    if not seqs:
        raise FileNotFoundError(f"{root}: no sequences")
    return seqs


def write_sequence(out_dir, frames, masks, boxes=None) -> None:
    """Store frames, masks and (optionally) 8-number ground-truth boxes."""
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(exist_ok=True)
    for i, (f, m) in enumerate(zip(frames, masks)):
        write_image(out_dir / "frames" / f"{i:05d}.png", f)
        write_mask(out_dir / "masks" / f"{i:05d}.png", m)
    if boxes is not None:
        write_boxes(out_dir / GROUNDTRUTH_FILE, boxes)
