"""On-disk dataset format and the in-memory data model.

Layout of a dataset directory::

    dataset.json                  name, classes, cases, exclusion_list
    images/<id>.json + <id>.raw   image header and payload
    labels/<id>.json + <id>.raw   optional u16 instance map + instance->class table
    boxes/<id>.json               optional ground-truth boxes

Raw payloads are little-endian and x-fastest: voxel (x, y, z) lives at
element ``x + dims[0] * (y + dims[1] * z)``. In memory, volumes are numpy
arrays indexed ``[x, y, z]``.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Iterable, Mapping, Sequence

import numpy as np

DTYPES: dict[str, np.dtype] = {
    "f32": np.dtype("<f4"),
    "i16": np.dtype("<i2"),
    "u8": np.dtype("u1"),
    "u16": np.dtype("<u2"),
}
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Base class for dataset validation failures."""


class MissingFileError(DatasetError):
    pass


class PayloadSizeError(DatasetError):
    pass


class DuplicateCaseError(DatasetError):
    pass


class UnknownClassError(DatasetError):
    pass


class InstanceTableError(DatasetError):
    pass


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    dtype: str = "f32"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(dims) != 3 or len(spacing) != 3:
            raise DatasetError("dims and spacing_mm need exactly 3 entries")
        if min(dims) < 1:
            raise DatasetError(f"dims must be >= 1, got {dims}")
        if not all(s > 0 and math.isfinite(s) for s in spacing):
            raise DatasetError(f"spacing_mm must be positive, got {spacing}")
        if self.dtype not in DTYPES:
            raise DatasetError(f"unsupported dtype {self.dtype!r}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)

    @property
    def num_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def nbytes(self) -> int:
        return self.num_voxels * DTYPES[self.dtype].itemsize

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing_mm": list(self.spacing_mm), "dtype": self.dtype}

    @classmethod
    def from_dict(cls, d: Mapping) -> "VolumeHeader":
        try:
            return cls(tuple(d["dims"]), tuple(d["spacing_mm"]), d.get("dtype", "f32"))
        except KeyError as exc:
            raise DatasetError(f"volume header misses field {exc}") from None


@dataclass(frozen=True, eq=False)
class Volume:
    header: VolumeHeader
    data: np.ndarray

    @property
    def spacing_mm(self) -> tuple[float, float, float]:
        return self.header.spacing_mm

    def __getitem__(self, index):
        return self.data[index]


def load_volume(header: VolumeHeader, payload: bytes | bytearray | BinaryIO) -> Volume:
    """Decode a little-endian x-fastest payload into a ``[x, y, z]`` array."""
    if not isinstance(payload, (bytes, bytearray, memoryview)):
        payload = payload.read()
    if header.dtype not in DTYPES:
        raise DatasetError(f"unsupported dtype {header.dtype!r}")
    if len(payload) < header.nbytes:
        raise PayloadSizeError(
            f"truncated payload: {len(payload)} bytes, header declares {header.nbytes}"
        )
    if len(payload) > header.nbytes:
        raise PayloadSizeError(
            f"payload size mismatch: {len(payload)} bytes, header declares {header.nbytes}"
        )
    flat = np.frombuffer(payload, dtype=DTYPES[header.dtype])
    data = flat.reshape(header.dims, order="F").astype(DTYPES[header.dtype].newbyteorder("="))
    return Volume(header, data)


def encode_volume(data: np.ndarray, dtype: str) -> bytes:
    return np.asarray(data).astype(DTYPES[dtype]).tobytes(order="F")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned half-open box ``[min, max)`` in voxel coordinates.

    Ground-truth boxes have integer corners; consolidated predictions may
    carry real-valued corners.
    """

    min: tuple[float, float, float]
    max: tuple[float, float, float]
    class_id: int = 0
    score: float | None = None

    def __post_init__(self):
        lo = tuple(_as_coord(v) for v in self.min)
        hi = tuple(_as_coord(v) for v in self.max)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("boxes are 3D")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"degenerate box min={lo} max={hi}")
        if int(self.class_id) < 0:
            raise ValueError("class_id must be non-negative")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)
        object.__setattr__(self, "class_id", int(self.class_id))
        if self.score is not None:
            object.__setattr__(self, "score", float(self.score))

    @property
    def extent(self) -> tuple:
        return tuple(b - a for a, b in zip(self.min, self.max))

    @property
    def center(self) -> tuple[float, float, float]:
        return tuple((a + b) / 2 for a, b in zip(self.min, self.max))

    @property
    def volume(self) -> float:
        e = self.extent
        return e[0] * e[1] * e[2]

    def extent_mm(self, spacing_mm: Sequence[float]) -> tuple[float, float, float]:
        return tuple(float(e) * float(s) for e, s in zip(self.extent, spacing_mm))

    def as_array(self) -> np.ndarray:
        return np.array([*self.min, *self.max], dtype=float)

    def to_dict(self) -> dict:
        d = {"min": list(self.min), "max": list(self.max), "class_id": self.class_id}
        if self.score is not None:
            d["score"] = self.score
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "BoundingBox":
        return cls(tuple(d["min"]), tuple(d["max"]), int(d.get("class_id", 0)), d.get("score"))


def _as_coord(v) -> int | float:
    f = float(v)
    return int(f) if f.is_integer() else f


def boxes_to_array(boxes: Iterable[BoundingBox]) -> np.ndarray:
    """Stack boxes into an ``(N, 6)`` float array ``[x0, y0, z0, x1, y1, z1]``."""
    rows = [b.as_array() for b in boxes]
    if not rows:
        return np.zeros((0, 6))
    return np.stack(rows)


@dataclass(frozen=True)
class Case:
    id: str
    image: VolumeHeader
    split: str = "train"
    labels: VolumeHeader | None = None
    instance_classes: Mapping[int, int] = field(default_factory=dict)
    objects: tuple[BoundingBox, ...] = ()
    object_instances: tuple[int | None, ...] = ()
    root: Path | None = field(default=None, compare=False, repr=False)

    @property
    def spacing_mm(self) -> tuple[float, float, float]:
        return self.image.spacing_mm

    def load_image(self) -> Volume:
        return _read_volume(self._path("images", ".raw"), self.image)

    def load_labels(self) -> Volume | None:
        if self.labels is None:
            return None
        return _read_volume(self._path("labels", ".raw"), self.labels)

    def _path(self, sub: str, suffix: str) -> Path:
        if self.root is None:
            raise DatasetError(f"case {self.id!r} is not backed by a directory")
        return self.root / sub / f"{self.id}{suffix}"


@dataclass(frozen=True)
class Dataset:
    name: str
    classes: tuple[str, ...]
    cases: tuple[Case, ...]
    exclusion_list: frozenset[tuple[str, int]] = frozenset()
    root: Path | None = field(default=None, compare=False, repr=False)

    def case(self, case_id: str) -> Case:
        for c in self.cases:
            if c.id == case_id:
                return c
        raise KeyError(case_id)

    def split(self, *splits: str) -> list[Case]:
        return [c for c in self.cases if c.split in splits]


def _read_volume(path: Path, header: VolumeHeader) -> Volume:
    if not path.exists():
        raise MissingFileError(f"missing payload file {path}")
    return load_volume(header, path.read_bytes())


def _read_json(path: Path) -> Any:
    if not path.exists():
        raise MissingFileError(f"missing file {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: invalid JSON ({exc})") from None


def _check_payload(path: Path, header: VolumeHeader) -> None:
    if not path.exists():
        raise MissingFileError(f"missing payload file {path}")
    size = path.stat().st_size
    if size != header.nbytes:
        raise PayloadSizeError(
            f"{path}: payload is {size} bytes but header {header.dims} {header.dtype} "
            f"declares {header.nbytes}"
        )


def _parse_objects(entries: Sequence[Mapping], where: str) -> tuple[list[BoundingBox], list]:
    boxes, instances = [], []
    for e in entries:
        try:
            boxes.append(BoundingBox.from_dict(e))
        except (KeyError, ValueError, TypeError) as exc:
            raise DatasetError(f"{where}: invalid box {e!r} ({exc})") from None
        inst = e.get("instance_id")
        instances.append(None if inst is None else int(inst))
    return boxes, instances


def load_dataset(root_path: str | os.PathLike) -> Dataset:
    """Load and fully validate a dataset directory."""
    root = Path(root_path)
    meta = _read_json(root / "dataset.json")
    for key in ("name", "classes", "cases"):
        if key not in meta:
            raise DatasetError(f"dataset.json misses field {key!r}")
    classes = tuple(str(c) for c in meta["classes"])
    n_classes = len(classes)

    seen: set[str] = set()
    cases = []
    for entry in meta["cases"]:
        cid = str(entry["id"])
        if cid in seen:
            raise DuplicateCaseError(f"duplicate case id {cid!r}")
        seen.add(cid)
        split = entry.get("split", "train")
        if split not in SPLITS:
            raise DatasetError(f"case {cid!r}: unknown split {split!r}")

        image = VolumeHeader.from_dict(_read_json(root / "images" / f"{cid}.json"))
        _check_payload(root / "images" / f"{cid}.raw", image)

        labels = None
        table: dict[int, int] = {}
        label_meta_path = root / "labels" / f"{cid}.json"
        if label_meta_path.exists():
            label_meta = _read_json(label_meta_path)
            labels = VolumeHeader.from_dict(label_meta)
            if labels.dtype != "u16":
                raise DatasetError(f"case {cid!r}: instance maps must be u16")
            if labels.dims != image.dims:
                raise DatasetError(f"case {cid!r}: label dims {labels.dims} != image dims {image.dims}")
            _check_payload(root / "labels" / f"{cid}.raw", labels)
            table = {int(k): int(v) for k, v in label_meta.get("instances", {}).items()}

        if "objects" in entry:
            boxes, instances = _parse_objects(entry["objects"], f"dataset.json case {cid!r}")
        elif (root / "boxes" / f"{cid}.json").exists():
            boxes, instances = _parse_objects(
                _read_json(root / "boxes" / f"{cid}.json"), f"boxes/{cid}.json"
            )
        else:
            boxes, instances = [], []

        for b in boxes:
            if b.class_id >= n_classes:
                raise UnknownClassError(
                    f"case {cid!r}: class_id {b.class_id} but only {n_classes} classes"
                )
        for inst, cls in table.items():
            if inst <= 0:
                raise InstanceTableError(f"case {cid!r}: instance ids start at 1, got {inst}")
            if not 0 <= cls < n_classes:
                raise UnknownClassError(
                    f"case {cid!r}: instance {inst} has class_id {cls} but only {n_classes} classes"
                )

        case = Case(cid, image, split, labels, table, tuple(boxes), tuple(instances), root)
        if labels is not None:
            present = np.unique(case.load_labels().data)
            missing = [int(i) for i in present if i != 0 and int(i) not in table]
            if missing:
                raise InstanceTableError(f"case {cid!r}: instance ids {missing} not in instance table")
            if boxes:
                if any(i is None for i in instances):
                    raise InstanceTableError(f"case {cid!r}: objects need instance_id when a labelmap exists")
                if len(set(instances)) != len(instances):
                    raise InstanceTableError(f"case {cid!r}: two objects share an instance id")
                for b, inst in zip(boxes, instances):
                    if inst not in table:
                        raise InstanceTableError(f"case {cid!r}: object instance {inst} not in table")
                    if table[inst] != b.class_id:
                        raise InstanceTableError(
                            f"case {cid!r}: object instance {inst} class {b.class_id} != table {table[inst]}"
                        )
        cases.append(case)

    exclusions = set()
    for item in meta.get("exclusion_list", []):
        cid, inst = str(item[0]), int(item[1])
        if cid not in seen:
            raise DatasetError(f"exclusion_list references unknown case {cid!r}")
        exclusions.add((cid, inst))

    return Dataset(str(meta["name"]), classes, tuple(cases), frozenset(exclusions), root)


# --------------------------------------------------------------------------
# Writing
# --------------------------------------------------------------------------


def write_volume(root: Path, sub: str, case_id: str, data: np.ndarray,
                 spacing_mm: Sequence[float], dtype: str, extra: Mapping | None = None) -> VolumeHeader:
    header = VolumeHeader(tuple(np.shape(data)), tuple(spacing_mm), dtype)
    folder = Path(root) / sub
    folder.mkdir(parents=True, exist_ok=True)
    (folder / f"{case_id}.raw").write_bytes(encode_volume(data, dtype))
    meta = header.to_dict()
    if extra:
        meta.update(extra)
    write_json_artifact(meta, folder / f"{case_id}.json")
    return header


def write_case(root: str | os.PathLike, case_id: str, image: np.ndarray, spacing_mm: Sequence[float],
               image_dtype: str = "f32", labelmap: np.ndarray | None = None,
               instance_classes: Mapping[int, int] | None = None,
               objects: Sequence[BoundingBox] | None = None,
               object_instances: Sequence[int | None] | None = None) -> None:
    root = Path(root)
    write_volume(root, "images", case_id, image, spacing_mm, image_dtype)
    if labelmap is not None:
        table = {str(k): int(v) for k, v in sorted((instance_classes or {}).items())}
        write_volume(root, "labels", case_id, labelmap, spacing_mm, "u16", {"instances": table})
    if objects is not None:
        write_boxes(root / "boxes" / f"{case_id}.json", objects, object_instances)


def write_boxes(path: str | os.PathLike, boxes: Sequence[BoundingBox],
                instances: Sequence[int | None] | None = None) -> None:
    rows = []
    for i, b in enumerate(boxes):
        d = b.to_dict()
        if instances is not None and instances[i] is not None:
            d["instance_id"] = int(instances[i])
        rows.append(d)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_json_artifact(rows, path)


def read_boxes(path: str | os.PathLike) -> list[BoundingBox]:
    return [BoundingBox.from_dict(d) for d in _read_json(Path(path))]


def write_dataset_json(root: str | os.PathLike, name: str, classes: Sequence[str],
                       cases: Sequence[tuple[str, str]],
                       exclusion_list: Iterable[tuple[str, int]] = ()) -> None:
    meta = {
        "name": name,
        "classes": list(classes),
        "cases": [{"id": cid, "split": split} for cid, split in cases],
        "exclusion_list": [list(x) for x in sorted(exclusion_list)],
    }
    Path(root).mkdir(parents=True, exist_ok=True)
    write_json_artifact(meta, Path(root) / "dataset.json")


def write_dataset(dataset: Dataset, root: str | os.PathLike) -> None:
    """Write ``dataset`` (which must be directory-backed) to a new directory."""
    root = Path(root)
    for case in dataset.cases:
        if case.root is None:
            raise DatasetError("can only copy directory-backed datasets")
        for sub in ("images", "labels"):
            if sub == "labels" and case.labels is None:
                continue
            (root / sub).mkdir(parents=True, exist_ok=True)
            for suffix in (".json", ".raw"):
                shutil.copyfile(case.root / sub / f"{case.id}{suffix}", root / sub / f"{case.id}{suffix}")
        if case.objects:
            insts = case.object_instances if case.object_instances else None
            write_boxes(root / "boxes" / f"{case.id}.json", case.objects, insts)
    write_dataset_json(root, dataset.name, dataset.classes,
                       [(c.id, c.split) for c in dataset.cases], dataset.exclusion_list)


def write_softmax(root: str | os.PathLike, case_id: str, softmax: np.ndarray,
                  spacing_mm: Sequence[float]) -> None:
    """Store a ``(channels, x, y, z)`` f32 score volume; channels follow each other in the payload."""
    softmax = np.asarray(softmax, dtype=np.float32)
    header = VolumeHeader(softmax.shape[1:], tuple(spacing_mm), "f32")
    folder = Path(root) / "softmax"
    folder.mkdir(parents=True, exist_ok=True)
    (folder / f"{case_id}.raw").write_bytes(b"".join(encode_volume(ch, "f32") for ch in softmax))
    write_json_artifact({**header.to_dict(), "channels": int(softmax.shape[0])}, folder / f"{case_id}.json")


def load_softmax(root: str | os.PathLike, case_id: str) -> np.ndarray:
    folder = Path(root) / "softmax"
    meta = _read_json(folder / f"{case_id}.json")
    header = VolumeHeader.from_dict(meta)
    channels = int(meta.get("channels", 0))
    if channels < 2:
        raise DatasetError(f"softmax/{case_id}.json: need at least 2 channels")
    path = folder / f"{case_id}.raw"
    if not path.exists():
        raise MissingFileError(f"missing payload file {path}")
    payload = path.read_bytes()
    if len(payload) != channels * header.nbytes:
        raise PayloadSizeError(
            f"{path}: payload is {len(payload)} bytes, header declares {channels * header.nbytes}"
        )
    step = header.nbytes
    return np.stack([load_volume(header, payload[i * step:(i + 1) * step]).data for i in range(channels)])


# --------------------------------------------------------------------------
# Deterministic JSON artifacts
# --------------------------------------------------------------------------


def to_jsonable(value: Any) -> Any:
    """Convert artifacts (dataclasses, numpy values, paths, enums) to plain JSON types."""
    if hasattr(value, "to_dict") and not isinstance(value, type):
        return to_jsonable(value.to_dict())
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: to_jsonable(getattr(value, f.name)) for f in dataclasses.fields(value)
                if f.compare}
    if isinstance(value, enum.Enum):
        return to_jsonable(value.value)
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (set, frozenset)):
        return [to_jsonable(v) for v in sorted(value)]
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        f = float(value)
        if not math.isfinite(f):
            return None
        return 0.0 if f == 0 else f
    if isinstance(value, os.PathLike):
        return os.fspath(value)
    return value


def dumps_artifact(value: Any) -> str:
    # floats go through repr (shortest round-trip form): stable and lossless
    return json.dumps(to_jsonable(value), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json_artifact(value: Any, path: str | os.PathLike) -> None:
    """Serialize ``value`` as deterministic JSON; identical inputs give identical bytes."""
    text = dumps_artifact(value)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def read_json_artifact(path: str | os.PathLike) -> Any:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
