"""
File formats: binary PPM images, label/detection text, DBT1 raw tensors and
COCO annotation/result documents.

Label files hold one ``class x1 y1 x2 y2 [ignore]`` line per box; detection
files hold ``class score x1 y1 x2 y2``. Coordinates are pixels in xyxy order.

DBT1 tensor layout (little-endian): ``b"DBT1"``, uint32 rank, rank * uint32
dims, then float32 data in row-major order.
"""

from __future__ import annotations

import math
import os
import re
import struct
from dataclasses import dataclass
from typing import Any, Hashable, Iterable, Mapping, Sequence

import numpy as np

from detbench.boxes import BBox, Detection, GroundTruth, clip_box
from detbench.errors import InputError

DEFAULT_CLASS_NAMES = ("with mask", "incorrect mask", "without mask")
TENSOR_MAGIC = b"DBT1"


@dataclass(frozen=True)
class ClassConfig:
    names: tuple[str, ...] = DEFAULT_CLASS_NAMES

    def __post_init__(self):
        names = tuple(self.names)
        if not names or any(not n.strip() for n in names):
            raise InputError("class names must be non-empty")
        if len(set(names)) != len(names):
            raise InputError(f"class names must be unique: {names}")
        object.__setattr__(self, "names", names)

    def __len__(self):
        return len(self.names)


# -- PPM -------------------------------------------------------------------------

_PPM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def decode_ppm(data: bytes) -> np.ndarray:
    """Binary P6 to float64 (H, W, 3) in [0, 1]."""
    fields_, pos = [], 0
    for _ in range(4):
        m = _PPM_TOKEN.match(data, pos)
        if not m:
            raise InputError("truncated PPM header")
        fields_.append(m.group(1))
        pos = m.end()
    if fields_[0] != b"P6":
        raise InputError(f"only binary PPM (P6) is supported, got {fields_[0][:8]!r}")
    try:
        w, h, maxval = (int(v) for v in fields_[1:])
    except ValueError:
        raise InputError("malformed PPM header") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise InputError(f"bad PPM dimensions {w}x{h} or maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * 3
    if len(data) - pos < n * np.dtype(dtype).itemsize:
        raise InputError("truncated PPM pixel data")
    pixels = np.frombuffer(data, dtype=dtype, count=n, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float64) / maxval


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError(f"image must be (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    pixels = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def write_ppm(path, image: np.ndarray):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


# -- label and detection text ----------------------------------------------------


def _lines(text):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _num(token, lineno, what):
    try:
        v = float(token)
    except ValueError:
        raise InputError(f"line {lineno}: bad {what} {token!r}") from None
    if not math.isfinite(v):
        raise InputError(f"line {lineno}: non-finite {what}")
    return v


def _class_id(token, lineno):
    try:
        c = int(token)
    except ValueError:
        raise InputError(f"line {lineno}: class id must be an integer, got {token!r}") from None
    if c < 0:
        raise InputError(f"line {lineno}: negative class id")
    return c


def parse_labels(text: str) -> list[GroundTruth]:
    out = []
    for lineno, parts in _lines(text):
        if len(parts) not in (5, 6):
            raise InputError(f"line {lineno}: expected 'class x1 y1 x2 y2 [ignore]'")
        box = BBox(*(_num(p, lineno, "coordinate") for p in parts[1:5]))
        ignore = len(parts) == 6 and parts[5] not in ("0", "false")
        out.append(GroundTruth(box, _class_id(parts[0], lineno), ignore))
    return out


def format_labels(labels: Iterable[GroundTruth]) -> str:
    lines = []
    for g in labels:
        coords = " ".join(repr(float(v)) for v in g.bbox.as_tuple())
        lines.append(f"{g.class_id} {coords}" + (" 1" if g.ignore else ""))
    return "".join(line + "\n" for line in lines)


def parse_detections(text: str) -> list[Detection]:
    out = []
    for lineno, parts in _lines(text):
        if len(parts) != 6:
            raise InputError(f"line {lineno}: expected 'class score x1 y1 x2 y2'")
        box = BBox(*(_num(p, lineno, "coordinate") for p in parts[2:6]))
        out.append(Detection(box, _class_id(parts[0], lineno), _num(parts[1], lineno, "score")))
    return out


def format_detections(dets: Iterable[Detection]) -> str:
    return "".join(
        f"{d.class_id} {d.score!r} " + " ".join(repr(float(v)) for v in d.bbox.as_tuple()) + "\n" for d in dets
    )


# -- DBT1 tensors ----------------------------------------------------------------


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    return TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    if data[:4] != TENSOR_MAGIC:
        raise InputError("not a DBT1 tensor file (bad magic)")
    try:
        (rank,) = struct.unpack_from("<I", data, 4)
        dims = struct.unpack_from(f"<{rank}I", data, 8)
    except struct.error:
        raise InputError("truncated DBT1 header") from None
    offset = 8 + 4 * rank
    size = math.prod(dims)
    if len(data) != offset + 4 * size:
        raise InputError(f"DBT1 payload is {len(data) - offset} bytes, expected {4 * size} for shape {dims}")
    return np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(dims).astype(np.float64)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


def write_tensor(path, arr: np.ndarray):
    with open(path, "wb") as fh:
        fh.write(encode_tensor(arr))


# -- COCO ------------------------------------------------------------------------


@dataclass(frozen=True)
class ImageEntry:
    id: Hashable
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class Annotation:
    image_id: Hashable
    class_id: int
    bbox: BBox
    ignore: bool = False


@dataclass(frozen=True)
class DatasetManifest:
    images: tuple[ImageEntry, ...]
    annotations: tuple[Annotation, ...]
    # (coco category id, name) ordered by category id; dense class id = position
    categories: tuple[tuple[int, str], ...]

    @property
    def class_map(self) -> dict[int, int]:
        """COCO category id -> dense 0-based class id."""
        return {cid: k for k, (cid, _) in enumerate(self.categories)}

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(name for _, name in self.categories)

    def ground_truths(self) -> dict[Hashable, list[GroundTruth]]:
        out = {img.id: [] for img in self.images}
        for a in self.annotations:
            out[a.image_id].append(GroundTruth(a.bbox, a.class_id, a.ignore))
        return out


def _require(obj, key, path):
    if not isinstance(obj, Mapping) or key not in obj:
        raise InputError(f"missing required field {path}.{key}" if path else f"missing required field {key}")
    return obj[key]


def _array(doc, key):
    value = _require(doc, key, "")
    if not isinstance(value, list):
        raise InputError(f"field {key} must be an array")
    return value


def _xywh(value, path):
    if not isinstance(value, (list, tuple)) or len(value) != 4:
        raise InputError(f"{path} must be [x, y, w, h]")
    try:
        x, y, w, h = (float(v) for v in value)
    except (TypeError, ValueError):
        raise InputError(f"{path} must be numeric") from None
    if not all(math.isfinite(v) for v in (x, y, w, h)) or w < 0 or h < 0:
        raise InputError(f"{path} must be finite with non-negative size")
    return x, y, w, h


def parse_coco(doc: Mapping[str, Any]) -> DatasetManifest:
    """Annotation document to manifest. Unknown fields are ignored."""
    images, seen = [], set()
    for i, im in enumerate(_array(doc, "images")):
        path = f"images[{i}]"
        entry = ImageEntry(
            _require(im, "id", path), str(im.get("file_name", "")),
            int(_require(im, "width", path)), int(_require(im, "height", path)),
        )
        if entry.width < 1 or entry.height < 1:
            raise InputError(f"{path}: width and height must be positive")
        if entry.id in seen:
            raise InputError(f"{path}: duplicate image id {entry.id!r}")
        seen.add(entry.id)
        images.append(entry)

    cats = []
    for i, c in enumerate(_array(doc, "categories")):
        cats.append((int(_require(c, "id", f"categories[{i}]")), str(c.get("name", ""))))
    cats.sort()
    if len({c for c, _ in cats}) != len(cats):
        raise InputError("duplicate category ids")
    class_map = {cid: k for k, (cid, _) in enumerate(cats)}

    by_id = {im.id: im for im in images}
    anns, dangling = [], []
    for i, a in enumerate(_array(doc, "annotations")):
        path = f"annotations[{i}]"
        img_id = _require(a, "image_id", path)
        cat = _require(a, "category_id", path)
        x, y, w, h = _xywh(_require(a, "bbox", path), f"{path}.bbox")
        if img_id not in by_id:
            dangling.append(f"{path}: image_id {img_id!r}")
            continue
        if cat not in class_map:
            dangling.append(f"{path}: category_id {cat!r}")
            continue
        im = by_id[img_id]
        box = clip_box(BBox(x, y, x + w, y + h), im.width, im.height)
        ignore = bool(a.get("iscrowd", 0)) or bool(a.get("ignore", 0))
        anns.append(Annotation(img_id, class_map[cat], box, ignore))
    if dangling:
        raise InputError("dangling references: " + "; ".join(dangling))
    return DatasetManifest(tuple(images), tuple(anns), tuple(cats))


def serialize_coco(manifest: DatasetManifest) -> dict:
    inverse = {k: cid for cid, k in manifest.class_map.items()}
    return {
        "images": [
            {"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height}
            for im in manifest.images
        ],
        "annotations": [
            {
                "id": k + 1,
                "image_id": a.image_id,
                "category_id": inverse[a.class_id],
                "bbox": [a.bbox.x_min, a.bbox.y_min, a.bbox.width, a.bbox.height],
                "area": a.bbox.area,
                "iscrowd": int(a.ignore),
            }
            for k, a in enumerate(manifest.annotations)
        ],
        "categories": [{"id": cid, "name": name} for cid, name in manifest.categories],
    }


def parse_coco_results(
    results: Sequence[Mapping[str, Any]], class_map: Mapping[int, int] | None = None
) -> dict[Hashable, list[Detection]]:
    """COCO results array to per-image detections, in file order.

    ``class_map`` turns COCO category ids into dense class ids; without it the
    category id is used as is.
    """
    if not isinstance(results, list):
        raise InputError("results document must be an array")
    out: dict[Hashable, list[Detection]] = {}
    for i, r in enumerate(results):
        path = f"[{i}]"
        img = _require(r, "image_id", path)
        cat = _require(r, "category_id", path)
        x, y, w, h = _xywh(_require(r, "bbox", path), f"{path}.bbox")
        score = float(_require(r, "score", path))
        if class_map is not None:
            if cat not in class_map:
                raise InputError(f"{path}: unknown category_id {cat!r}")
            cat = class_map[cat]
        out.setdefault(img, []).append(Detection(BBox(x, y, x + w, y + h), int(cat), score))
    return out


def serialize_coco_results(dets: Mapping[Hashable, Sequence[Detection]], class_map: Mapping[int, int] | None = None) -> list[dict]:
    inverse = {k: cid for cid, k in class_map.items()} if class_map is not None else None
    out = []
    for img, items in dets.items():
        for d in items:
            out.append({
                "image_id": img,
                "category_id": inverse[d.class_id] if inverse is not None else d.class_id,
                "bbox": [d.bbox.x_min, d.bbox.y_min, d.bbox.width, d.bbox.height],
                "score": d.score,
            })
    return out


def list_images(directory) -> list[str]:
    """Sorted ``*.ppm`` paths in a directory."""
    if not os.path.isdir(directory):
        raise InputError(f"not a directory: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".ppm"))
    if not names:
        raise InputError(f"no .ppm images in {directory}")
    return [os.path.join(directory, n) for n in names]
