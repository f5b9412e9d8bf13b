"""Bit-exact persistence: embedding packs, weight manifests, dataset manifests, masks.

EPK1 pack layout (all integers little-endian):

    header (21 bytes):
        magic        4s   "EPK1"
        version      u16  1
        flags        u16  bit0: records carry assignment maps
        channels     u32  C_o
        dtype        u8   0 = 32-bit little-endian IEEE float
        record_count u64
    record:
        image_id     u16 length + UTF-8 bytes
        grid_h       u16
        grid_w       u16
        vec_count    u32
        method       u8   (codes below)
        payload      vec_count * C_o  f32, row-major
        assignment   grid_h * grid_w  u16 labels (only when flags bit0)

    method codes: dense=0 global=1 kmeans=2 ag_t=3 ag_f=4 region_proposal=5
                  anchors=6 attention=7 adaptive_kmeans=8 mixed=9

WGT1 weight manifest layout:

    magic "WGT1", then u32 M, C_e, C_q, C_v, C_o; body is f32 row-major:
    per head m: query_w (C_q x C_e), query_b (C_q), key_w (C_q x C_e),
    key_b (C_q), value_w (C_v x C_e), value_b (C_v); then out_w
    (C_o x M*C_v), out_b (C_o).

Dataset manifests and mask files are JSON; masks use run-length encoding of
the row-major grid with runs alternating zeros/ones, starting with zeros.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .aggregation import ClusterAssignment, METHODS, RepresentativeSet, SegmentMask
from .tensor import EmbeddingMap, FeatureGrid, ProjectionWeights

__all__ = [
    "PACK_MAGIC",
    "METHOD_CODES",
    "PackFormatError",
    "CorruptPackError",
    "PackRecord",
    "write_pack",
    "read_pack",
    "as_embedding_map",
    "as_feature_grid",
    "as_representative_set",
    "save_weights",
    "load_weights",
    "ImageInfo",
    "CategoryInfo",
    "Annotation",
    "DatasetManifest",
    "load_manifest",
    "save_manifest",
    "rle_encode",
    "rle_decode",
    "load_masks",
    "save_masks",
]

PACK_MAGIC = b"EPK1"
_HEADER = struct.Struct("<4sHHIBQ")
_REC_HEAD = struct.Struct("<HHIB")
_ID_LEN = struct.Struct("<H")

METHOD_CODES = {name: code for code, name in enumerate(METHODS)}
_CODE_METHODS = {code: name for name, code in METHOD_CODES.items()}


class PackFormatError(ValueError):
    """File is not a valid pack (bad magic, version, dtype, or field)."""


class CorruptPackError(ValueError):
    """Pack is structurally valid but ends or disagrees mid-record."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class PackRecord:
    """One decoded pack record; the common carrier between modules."""

    image_id: str
    grid_h: int
    grid_w: int
    method: str
    vectors: np.ndarray  # (vec_count, channels) float32
    assignment: np.ndarray | None  # (grid_h*grid_w,) uint16

    @property
    def vec_count(self) -> int:
        return self.vectors.shape[0]

    @property
    def channels(self) -> int:
        return self.vectors.shape[1]


def _to_record(obj) -> PackRecord:
    if isinstance(obj, PackRecord):
        return obj
    if isinstance(obj, EmbeddingMap):
        return PackRecord(
            image_id=obj.image_id,
            grid_h=obj.height,
            grid_w=obj.width,
            method="dense",
            vectors=obj.values,
            assignment=None,
        )
    if isinstance(obj, RepresentativeSet):
        assignment = None
        if obj.assignment is not None:
            assignment = obj.assignment.labels.astype(np.uint16)
        return PackRecord(
            image_id=obj.image_id,
            grid_h=obj.grid_dims[0],
            grid_w=obj.grid_dims[1],
            method=obj.method,
            vectors=obj.vectors,
            assignment=assignment,
        )
    raise TypeError(f"cannot pack {type(obj).__name__}")


def _validate_record(rec: PackRecord) -> None:
    if rec.method not in METHOD_CODES:
        raise PackFormatError(f"unknown method {rec.method!r}")
    if rec.vec_count < 1:
        raise PackFormatError(f"record {rec.image_id!r} has no vectors")
    if rec.grid_h < 1 or rec.grid_w < 1 or rec.grid_h > 0xFFFF or rec.grid_w > 0xFFFF:
        raise PackFormatError(f"record {rec.image_id!r} grid dims out of range")
    if rec.method == "dense" and rec.vec_count != rec.grid_h * rec.grid_w:
        raise PackFormatError(
            f"dense record {rec.image_id!r}: vec_count {rec.vec_count} != grid area"
        )
    if rec.assignment is not None:
        if rec.assignment.shape != (rec.grid_h * rec.grid_w,):
            raise PackFormatError(
                f"record {rec.image_id!r}: assignment length != grid area"
            )
        if rec.assignment.size and int(rec.assignment.max()) >= rec.vec_count:
            raise PackFormatError(
                f"record {rec.image_id!r}: assignment label >= vec_count"
            )


def write_pack(records: Iterable, path) -> dict:
    """Stream records (EmbeddingMap / RepresentativeSet / PackRecord) to a pack.

    All records must share one channel count, and either all or none carry
    assignment maps (the pack header has a single assignment flag). Returns
    {"records": n, "bytes": total}.
    """
    path = Path(path)
    count = 0
    channels = None
    with_assignment = None
    with open(path, "wb") as f:
        f.write(_HEADER.pack(PACK_MAGIC, 1, 0, 0, 0, 0))  # placeholder header
        for obj in records:
            rec = _to_record(obj)
            _validate_record(rec)
            if channels is None:
                channels = rec.channels
                with_assignment = rec.assignment is not None
            elif rec.channels != channels:
                raise PackFormatError(
                    f"channel mismatch mid-stream: record {rec.image_id!r} has "
                    f"{rec.channels}, pack has {channels}"
                )
            if (rec.assignment is not None) != with_assignment:
                raise PackFormatError(
                    f"assignment presence mismatch mid-stream at record {rec.image_id!r}"
                )
            id_bytes = rec.image_id.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise PackFormatError(f"image_id too long: {len(id_bytes)} bytes")
            f.write(_ID_LEN.pack(len(id_bytes)))
            f.write(id_bytes)
            f.write(_REC_HEAD.pack(rec.grid_h, rec.grid_w, rec.vec_count, METHOD_CODES[rec.method]))
            f.write(np.ascontiguousarray(rec.vectors, dtype="<f4").tobytes())
            if with_assignment:
                f.write(np.ascontiguousarray(rec.assignment, dtype="<u2").tobytes())
            count += 1
        total = f.tell()
        flags = 1 if with_assignment else 0
        f.seek(0)
        f.write(_HEADER.pack(PACK_MAGIC, 1, flags, channels or 0, 0, count))
        f.flush()
    return {"records": count, "bytes": total}


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise CorruptPackError(f"truncated {what}: wanted {n} bytes, got {len(buf)}", offset)
    return buf


def read_pack(path) -> Iterator[PackRecord]:
    """Stream records from a pack, validating structure as it goes."""
    path = Path(path)
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise CorruptPackError("truncated header", 0)
        magic, version, flags, channels, dtype, record_count = _HEADER.unpack(header)
        if magic != PACK_MAGIC:
            raise PackFormatError(f'bad magic {magic!r}, expected "EPK1"')
        if version != 1:
            raise PackFormatError(f"unsupported version {version}")
        if dtype != 0:
            raise PackFormatError(f"unsupported dtype code {dtype}")
        if flags & ~1:
            raise PackFormatError(f"unknown flag bits 0x{flags:04x}")
        with_assignment = bool(flags & 1)
        for _ in range(record_count):
            (id_len,) = _ID_LEN.unpack(_read_exact(f, 2, "record id length"))
            image_id = _read_exact(f, id_len, "record id").decode("utf-8")
            grid_h, grid_w, vec_count, method_code = _REC_HEAD.unpack(
                _read_exact(f, _REC_HEAD.size, "record header")
            )
            if method_code not in _CODE_METHODS:
                raise PackFormatError(f"unknown method code {method_code}")
            payload = _read_exact(f, vec_count * channels * 4, "record payload")
            vectors = np.frombuffer(payload, dtype="<f4").reshape(vec_count, channels).copy()
            assignment = None
            if with_assignment:
                raw = _read_exact(f, grid_h * grid_w * 2, "assignment map")
                assignment = np.frombuffer(raw, dtype="<u2").copy()
            rec = PackRecord(
                image_id=image_id,
                grid_h=grid_h,
                grid_w=grid_w,
                method=_CODE_METHODS[method_code],
                vectors=vectors,
                assignment=assignment,
            )
            _validate_record(rec)
            yield rec
        offset = f.tell()
        if f.read(1):
            raise CorruptPackError("trailing bytes after last record", offset)


def as_embedding_map(rec: PackRecord) -> EmbeddingMap:
    if rec.method != "dense":
        raise ValueError(f"record {rec.image_id!r} is {rec.method}, not dense")
    return EmbeddingMap(rec.grid_h, rec.grid_w, rec.vectors, image_id=rec.image_id)


def as_feature_grid(rec: PackRecord) -> FeatureGrid:
    if rec.method != "dense":
        raise ValueError(f"record {rec.image_id!r} is {rec.method}, not dense")
    return FeatureGrid(rec.grid_h, rec.grid_w, rec.vectors, image_id=rec.image_id)


def as_representative_set(rec: PackRecord) -> RepresentativeSet:
    assignment = None
    if rec.assignment is not None:
        assignment = ClusterAssignment(rec.assignment.astype(np.int32), rec.vec_count)
    return RepresentativeSet(
        image_id=rec.image_id,
        method=rec.method,
        vectors=rec.vectors,
        assignment=assignment,
        grid_dims=(rec.grid_h, rec.grid_w),
    )


# ---------------------------------------------------------------------------
# WGT1 weight manifest

_WGT_MAGIC = b"WGT1"
_WGT_HEADER = struct.Struct("<4s5I")


def save_weights(weights: ProjectionWeights, path) -> None:
    m = weights.heads
    c_e, c_q, c_v, c_o = (
        weights.in_channels,
        weights.query_channels,
        weights.value_channels,
        weights.out_channels,
    )
    with open(path, "wb") as f:
        f.write(_WGT_HEADER.pack(_WGT_MAGIC, m, c_e, c_q, c_v, c_o))
        for i in range(m):
            for arr in (
                weights.query_w[i], weights.query_b[i],
                weights.key_w[i], weights.key_b[i],
                weights.value_w[i], weights.value_b[i],
            ):
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(weights.out_w, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(weights.out_b, dtype="<f4").tobytes())
        f.flush()


def load_weights(path) -> ProjectionWeights:
    with open(path, "rb") as f:
        header = f.read(_WGT_HEADER.size)
        if len(header) < _WGT_HEADER.size:
            raise CorruptPackError("truncated weight header", 0)
        magic, m, c_e, c_q, c_v, c_o = _WGT_HEADER.unpack(header)
        if magic != _WGT_MAGIC:
            raise PackFormatError(f'bad magic {magic!r}, expected "WGT1"')

        def take(shape) -> np.ndarray:
            n = int(np.prod(shape))
            raw = _read_exact(f, n * 4, "weight block")
            return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

        q_w = np.empty((m, c_q, c_e), dtype=np.float32)
        q_b = np.empty((m, c_q), dtype=np.float32)
        k_w = np.empty_like(q_w)
        k_b = np.empty_like(q_b)
        v_w = np.empty((m, c_v, c_e), dtype=np.float32)
        v_b = np.empty((m, c_v), dtype=np.float32)
        for i in range(m):
            q_w[i] = take((c_q, c_e))
            q_b[i] = take((c_q,))
            k_w[i] = take((c_q, c_e))
            k_b[i] = take((c_q,))
            v_w[i] = take((c_v, c_e))
            v_b[i] = take((c_v,))
        out_w = take((c_o, m * c_v))
        out_b = take((c_o,))
        offset = f.tell()
        if f.read(1):
            raise CorruptPackError("trailing bytes after weights", offset)
    return ProjectionWeights(q_w, q_b, k_w, k_b, v_w, v_b, out_w, out_b)


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass(frozen=True)
class ImageInfo:
    id: str
    width: int
    height: int


@dataclass(frozen=True)
class CategoryInfo:
    id: int
    name: str
    rare: bool = False


@dataclass(frozen=True)
class Annotation:
    image_id: str
    category_id: int
    area: float


@dataclass(frozen=True)
class DatasetManifest:
    images: tuple[ImageInfo, ...]
    categories: tuple[CategoryInfo, ...]
    annotations: tuple[Annotation, ...]

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        image_ids = {img.id for img in self.images}
        if len(image_ids) != len(self.images):
            raise ValueError("duplicate image ids in manifest")
        cat_ids = {c.id for c in self.categories}
        if len(cat_ids) != len(self.categories):
            raise ValueError("duplicate category ids in manifest")
        for ann in self.annotations:
            if ann.image_id not in image_ids:
                raise ValueError(f"annotation references unknown image {ann.image_id!r}")
            if ann.category_id not in cat_ids:
                raise ValueError(f"annotation references unknown category {ann.category_id}")
            if not ann.area > 0:
                raise ValueError(f"non-positive area {ann.area} on image {ann.image_id!r}")

    def positives(self, category_id: int, max_area: float | None = None) -> set[str]:
        """Image ids holding at least one instance of the category.

        With max_area, only instances with area <= max_area count.
        """
        return {
            a.image_id
            for a in self.annotations
            if a.category_id == category_id and (max_area is None or a.area <= max_area)
        }

    def annotation_counts(self) -> dict[int, int]:
        counts = {c.id: 0 for c in self.categories}
        for a in self.annotations:
            counts[a.category_id] += 1
        return counts


def load_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    try:
        images = tuple(
            ImageInfo(str(i["id"]), int(i["width"]), int(i["height"])) for i in data["images"]
        )
        categories = tuple(
            CategoryInfo(int(c["id"]), str(c["name"]), bool(c.get("rare", False)))
            for c in data["categories"]
        )
        annotations = tuple(
            Annotation(str(a["image_id"]), int(a["category_id"]), float(a["area"]))
            for a in data["annotations"]
        )
    except KeyError as e:
        raise ValueError(f"manifest missing field {e.args[0]!r}") from None
    return DatasetManifest(images, categories, annotations)


def save_manifest(manifest: DatasetManifest, path) -> None:
    data = {
        "images": [{"id": i.id, "width": i.width, "height": i.height} for i in manifest.images],
        "categories": [
            {"id": c.id, "name": c.name, "rare": c.rare} for c in manifest.categories
        ],
        "annotations": [
            {"image_id": a.image_id, "category_id": a.category_id, "area": a.area}
            for a in manifest.annotations
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, sort_keys=True)


# ---------------------------------------------------------------------------
# RLE masks


def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths alternating zero/one runs, starting with zeros."""
    flat = np.ascontiguousarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate([[0], boundaries, [flat.size]])
    runs = np.diff(edges).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    runs = [int(r) for r in runs]
    if any(r < 0 for r in runs):
        raise ValueError("negative run length")
    if sum(runs) != h * w:
        raise ValueError(f"run lengths sum to {sum(runs)}, expected {h * w}")
    values = np.arange(len(runs)) % 2
    return np.repeat(values.astype(bool), runs).reshape(h, w)


def load_masks(path) -> SegmentMask:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    masks = tuple(
        rle_decode(m["rle"], (int(m["size"][0]), int(m["size"][1]))) for m in data["masks"]
    )
    return SegmentMask(image_id=str(data["image_id"]), masks=masks)


def save_masks(masks: SegmentMask, path) -> None:
    data = {
        "image_id": masks.image_id,
        "masks": [
            {"size": [int(m.shape[0]), int(m.shape[1])], "rle": rle_encode(m)}
            for m in masks.masks
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f)
