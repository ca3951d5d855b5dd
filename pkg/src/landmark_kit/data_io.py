"""File formats: NPY/NPZ/PNG tensors, landmark CSV tables and dataset manifests.

Manifest JSON layout (paths relative to the manifest file)::

    {
      "kind": "landmark" | "heatmap" | "mask" | "patch",
      "spatial_dims": 2,
      "class_names": ["L0", "L1"],
      "resize_to": [256, 256],            # optional
      "landmarks_csv": "truth.csv",       # optional, keyed by entry id
      "entries": [
        {
          "id": "sample_0000",
          "image": "images/sample_0000.npy",
          "spacing": [0.1, 0.1],
          "landmarks": [[[r, c]], [[r, c]]],   # (C, I, D); null = missing
          "heatmap": "heatmaps/sample_0000.npy",   # heatmap kind
          "mask": "masks/sample_0000.npy",         # mask kind
          "patch": {"origin": [..], "size": [..], "parent_size": [..]}  # patch kind
        }
      ]
    }
"""

from __future__ import annotations

import ast
import csv
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import ndimage

from .encode import mask_to_landmarks
from .geometry import SENTINEL, LandmarkSet, PatchSpec, patch_to_global

__all__ = [
    "FormatError",
    "SUPPORTED_DTYPES",
    "read_tensor",
    "write_tensor",
    "read_npy_bytes",
    "npy_bytes",
    "read_npz",
    "write_npz",
    "read_landmarks_csv",
    "write_landmarks_csv",
    "resize_landmarks",
    "resize_image",
    "DatasetManifest",
    "ManifestEntry",
    "Sample",
    "load_manifest",
]

logger = logging.getLogger(__name__)

NPY_MAGIC = b"\x93NUMPY"
SUPPORTED_DTYPES = {
    np.dtype("<f4"): "<f4",
    np.dtype("<f8"): "<f8",
    np.dtype("u1"): "|u1",
    np.dtype("<u2"): "<u2",
}
# fixed timestamp so NPZ archives are byte-reproducible
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class FormatError(ValueError):
    """Malformed or unsupported file content."""

    def __init__(self, message: str, path: str | Path | None = None, offset: int | None = None,
                 line: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{': '.join([', '.join(where), message]) if where else message}")
        self.path, self.offset, self.line = path, offset, line


# -- NPY / NPZ ---------------------------------------------------------------

def read_npy_bytes(data: bytes, path: str | Path | None = None) -> NDArray:
    """Decode an NPY (format 1.0 or 2.0) payload."""
    if data[:6] != NPY_MAGIC:
        raise FormatError("bad NPY magic", path, 0)
    if len(data) < 10:
        raise FormatError("truncated NPY version/header length", path, len(data))
    major, minor = data[6], data[7]
    if (major, minor) == (1, 0):
        hlen, start = int.from_bytes(data[8:10], "little"), 10
    elif (major, minor) == (2, 0):
        if len(data) < 12:
            raise FormatError("truncated NPY header length", path, len(data))
        hlen, start = int.from_bytes(data[8:12], "little"), 12
    else:
        raise FormatError(f"unsupported NPY version {major}.{minor}", path, 6)
    if len(data) < start + hlen:
        raise FormatError("truncated NPY header", path, len(data))
    try:
        header = ast.literal_eval(data[start:start + hlen].decode("latin1"))
        descr, fortran, shape = header["descr"], header["fortran_order"], tuple(header["shape"])
    except (ValueError, SyntaxError, KeyError, TypeError) as exc:
        raise FormatError(f"unparseable NPY header ({exc})", path, start) from None
    if fortran:
        raise FormatError("Fortran-order arrays are not supported", path, start)
    try:
        dtype = np.dtype(descr)
    except TypeError:
        raise FormatError(f"unknown dtype {descr!r}", path, start) from None
    if dtype not in SUPPORTED_DTYPES:
        raise FormatError(f"unsupported dtype {descr!r}", path, start)
    offset = start + hlen
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) - offset < nbytes:
        raise FormatError(f"truncated payload: expected {nbytes} bytes", path, len(data))
    return np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape).copy()


def npy_bytes(array: ArrayLike) -> bytes:
    arr = np.asarray(array)
    descr = SUPPORTED_DTYPES.get(arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype)
    if descr is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=np.dtype(descr))
    buf = io.BytesIO()
    np.lib.format.write_array(buf, arr, version=(1, 0), allow_pickle=False)
    return buf.getvalue()


def read_npz(path: str | Path) -> dict[str, NDArray]:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            out = {}
            for name in zf.namelist():
                key = name[:-4] if name.endswith(".npy") else name
                out[key] = read_npy_bytes(zf.read(name), f"{path}:{name}")
            return out
    except zipfile.BadZipFile as exc:
        raise FormatError(f"not a valid NPZ archive ({exc})", path, 0) from None


def write_npz(path: str | Path, arrays: Mapping[str, ArrayLike], compress: bool = True) -> None:
    method = zipfile.ZIP_DEFLATED if compress else zipfile.ZIP_STORED
    with zipfile.ZipFile(path, "w", compression=method) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            info.compress_type = method
            info.external_attr = 0o644 << 16
            zf.writestr(info, npy_bytes(arr))


def _read_png(path: Path) -> NDArray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "I;16", "I;16B", "I;16L"):
                raise FormatError(f"only 8/16-bit grayscale PNG is supported, got mode {img.mode}", path)
            arr = np.array(img)
    except UnidentifiedImageError:
        raise FormatError("not a readable PNG", path, 0) from None
    return arr.astype(np.uint8 if arr.dtype == np.uint8 else np.uint16)


def _write_png(path: Path, array: NDArray) -> None:
    from PIL import Image

    arr = np.asarray(array)
    if arr.ndim != 2 or arr.dtype not in (np.uint8, np.uint16):
        raise FormatError("PNG output needs a 2-D uint8 or uint16 array", path)
    Image.fromarray(np.ascontiguousarray(arr)).save(path, format="PNG")


def read_tensor(path: str | Path) -> NDArray | dict[str, NDArray]:
    """Read ``.npy``, ``.png`` (arrays) or ``.npz`` (dict of arrays)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        return read_npy_bytes(path.read_bytes(), path)
    if suffix == ".npz":
        return read_npz(path)
    if suffix == ".png":
        return _read_png(path)
    raise FormatError(f"unsupported file type {suffix!r}", path)


def write_tensor(path: str | Path, data: ArrayLike | Mapping[str, ArrayLike]) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        path.write_bytes(npy_bytes(data))
    elif suffix == ".npz":
        write_npz(path, data)
    elif suffix == ".png":
        _write_png(path, data)
    else:
        raise FormatError(f"unsupported file type {suffix!r}", path)


# -- landmark CSV --------------------------------------------------------------

_CSV_HEAD = ["image_id", "class", "instance"]


def read_landmarks_csv(path: str | Path,
                       class_names: Sequence[str] | None = None) -> tuple[LandmarkSet, list[str]]:
    """Read ``image_id,class,instance,dim0,dim1[,dim2]`` rows.

    Returns the landmarks (N, C, I, D) and the image ids, both in order of
    first appearance. Classes follow ``class_names`` when given. Cells with
    no row are missing (NaN).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise FormatError("empty landmark CSV", path, line=1)
        header = [h.strip() for h in header]
        dims = header[3:]
        if header[:3] != _CSV_HEAD or dims not in (["dim0", "dim1"], ["dim0", "dim1", "dim2"]):
            raise FormatError(f"bad header {header}", path, line=1)
        d = len(dims)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 3 + d:
                raise FormatError(f"expected {3 + d} fields, got {len(row)}", path, line=lineno)
            try:
                inst = int(row[2])
                xyz = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise FormatError(str(exc), path, line=lineno) from None
            if inst < 0:
                raise FormatError("instance index must be >= 0", path, line=lineno)
            rows.append((row[0].strip(), row[1].strip(), inst, xyz, lineno))

    ids: dict[str, int] = {}
    names: dict[str, int] = {n: i for i, n in enumerate(class_names or [])}
    for image_id, cls, _, _, lineno in rows:
        ids.setdefault(image_id, len(ids))
        if cls not in names:
            if class_names is not None:
                raise FormatError(f"unknown class {cls!r}", path, line=lineno)
            names[cls] = len(names)
    n_inst = max([r[2] for r in rows] + [0]) + 1
    coords = np.full((len(ids), len(names), n_inst, d), SENTINEL)
    for image_id, cls, inst, xyz, _ in rows:
        coords[ids[image_id], names[cls], inst] = xyz
    return LandmarkSet(coords, tuple(names)), list(ids)


def write_landmarks_csv(path: str | Path, lms: LandmarkSet, image_ids: Sequence[str]) -> None:
    """Write present landmarks; missing entries produce no row."""
    if len(image_ids) != lms.n_samples:
        raise ValueError("one image id per sample is required")
    d = lms.spatial_dims
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(_CSV_HEAD + [f"dim{k}" for k in range(d)])
        missing = lms.missing
        for n, image_id in enumerate(image_ids):
            for c, name in enumerate(lms.class_names):
                for i in range(lms.n_instances):
                    if not missing[n, c, i]:
                        w.writerow([image_id, name, i] + [repr(float(v)) for v in lms.coords[n, c, i]])


# -- resizing ------------------------------------------------------------------

def _factors(from_size: Sequence[float], to_size: Sequence[float]) -> NDArray[np.float64]:
    src = np.asarray(from_size, dtype=np.float64)
    dst = np.asarray(to_size, dtype=np.float64)
    if src.shape != dst.shape or np.any(src <= 0) or np.any(dst <= 0):
        raise ValueError(f"sizes must be positive and equal length, got {from_size} -> {to_size}")
    return dst / src


def resize_landmarks(lms, from_size: Sequence[float], to_size: Sequence[float]):
    """Rescale coordinates between grids: ``y' = (y + 0.5) * to / from - 0.5``.

    Pixel edges map to pixel edges, so ``-0.5`` is fixed at any scale.
    """
    scale = _factors(from_size, to_size)
    if isinstance(lms, LandmarkSet):
        return lms.with_coords((np.asarray(lms.coords) + 0.5) * scale - 0.5)
    return (np.asarray(lms, dtype=np.float64) + 0.5) * scale - 0.5


def resize_image(image: ArrayLike, to_size: Sequence[int], order: int = 1) -> NDArray[np.float64]:
    """Resample the trailing spatial axes with the same pixel-center mapping.

    ``order`` 0 is nearest neighbour, 1 is linear. Leading axes (channels)
    are kept.
    """
    img = np.asarray(image, dtype=np.float64)
    d = len(to_size)
    spatial = img.shape[-d:]
    scale = _factors(spatial, to_size)
    axes = [(np.arange(n) + 0.5) / s - 0.5 for n, s in zip(to_size, scale)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    lead = img.shape[:-d]
    flat = img.reshape((-1,) + spatial)
    out = np.stack([ndimage.map_coordinates(ch, coords, order=order, mode="nearest") for ch in flat])
    return out.reshape(lead + tuple(int(n) for n in to_size))


# -- manifests -----------------------------------------------------------------

_KIND_FIELD = {"landmark": "landmarks", "heatmap": "heatmap", "mask": "mask", "patch": "patch"}


@dataclass
class ManifestEntry:
    id: str
    image: Path | None
    spacing: tuple[float, ...]
    landmarks: NDArray[np.float64] | None = None
    heatmap: Path | None = None
    mask: Path | None = None
    patch: PatchSpec | None = None
    extra: dict[str, Any] = field(default_factory=dict)


@dataclass
class Sample:
    id: str
    image: NDArray | None
    spacing: tuple[float, ...]
    landmarks: NDArray[np.float64] | None
    heatmap: NDArray | None = None
    mask: NDArray | None = None
    patch: PatchSpec | None = None
    global_landmarks: NDArray[np.float64] | None = None


@dataclass
class DatasetManifest:
    """Parsed manifest; iterate it to load samples lazily in file order.

    Entries that fail to load are skipped and recorded in ``diagnostics``.
    """

    kind: str
    spatial_dims: int
    class_names: tuple[str, ...]
    entries: list[ManifestEntry]
    resize_to: tuple[int, ...] | None = None
    root: Path = Path(".")
    diagnostics: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Sample]:
        self.diagnostics = []
        for entry in self.entries:
            try:
                yield self.load(entry)
            except (OSError, FormatError, ValueError) as exc:
                msg = f"entry {entry.id!r}: {exc}"
                logger.warning(msg)
                self.diagnostics.append(msg)

    def landmark_set(self) -> LandmarkSet:
        """Annotated landmarks of every entry as one set (no file access)."""
        coords = [e.landmarks for e in self.entries]
        if any(c is None for c in coords):
            raise ValueError("not every entry carries landmarks")
        n_inst = max(c.shape[1] for c in coords)
        out = np.full((len(coords), len(self.class_names), n_inst, self.spatial_dims), SENTINEL)
        for n, c in enumerate(coords):
            out[n, :, : c.shape[1]] = c
        return LandmarkSet(out, self.class_names)

    def _array(self, path: Path) -> NDArray:
        data = read_tensor(path)
        if isinstance(data, dict):
            raise FormatError("expected a single array, got an NPZ archive", path)
        return data

    def load(self, entry: ManifestEntry) -> Sample:
        image = self._array(entry.image) if entry.image is not None else None
        heatmap = self._array(entry.heatmap) if entry.heatmap is not None else None
        mask = self._array(entry.mask) if entry.mask is not None else None
        landmarks = entry.landmarks
        if self.kind == "mask":
            if mask.ndim == self.spatial_dims:  # single-class mask without a channel axis
                mask = mask[None]
            landmarks = mask_to_landmarks(mask).coords[0]
        spacing = entry.spacing
        if self.resize_to is not None:
            reference = image if image is not None else (heatmap if heatmap is not None else mask)
            src = reference.shape[-self.spatial_dims:]
            if landmarks is not None:
                landmarks = resize_landmarks(landmarks, src, self.resize_to)
            if image is not None:
                image = resize_image(image, self.resize_to, order=1)
            if heatmap is not None:
                heatmap = resize_image(heatmap, self.resize_to, order=1)
            if mask is not None:
                mask = resize_image(mask, self.resize_to, order=0)
            spacing = tuple(float(s) for s in np.asarray(spacing) * np.asarray(src) / np.asarray(self.resize_to))
        global_lms = None
        if entry.patch is not None and landmarks is not None:
            global_lms = patch_to_global(landmarks, entry.patch)
        return Sample(entry.id, image, spacing, landmarks, heatmap, mask, entry.patch, global_lms)


def _parse_landmarks(raw: Any, n_classes: int, d: int) -> NDArray[np.float64]:
    if len(raw) != n_classes:
        raise FormatError(f"{len(raw)} landmark classes listed, expected {n_classes}")
    n_inst = max([1] + [len(c) for c in raw if c is not None])
    out = np.full((n_classes, n_inst, d), SENTINEL)
    for c, instances in enumerate(raw):
        for i, point in enumerate(instances or []):
            if point is not None:
                if len(point) != d:
                    raise FormatError(f"landmark with {len(point)} coordinates in a {d}-D manifest")
                out[c, i] = [SENTINEL if v is None else float(v) for v in point]
    return out


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON ({exc.msg})", path, exc.pos) from None
    root = path.parent
    kind = doc.get("kind")
    if kind not in _KIND_FIELD:
        raise FormatError(f"manifest kind must be one of {sorted(_KIND_FIELD)}, got {kind!r}", path)
    d = doc.get("spatial_dims")
    if d not in (2, 3):
        raise FormatError(f"spatial_dims must be 2 or 3, got {d!r}", path)
    class_names = tuple(str(c) for c in doc.get("class_names", []))
    resize_to = doc.get("resize_to")
    if resize_to is not None:
        resize_to = tuple(int(v) for v in resize_to)
        if len(resize_to) != d or min(resize_to) < 1:
            raise FormatError(f"resize_to {resize_to} invalid for {d}-D data", path)

    csv_lms = None
    if "landmarks_csv" in doc:
        lms, ids = read_landmarks_csv(root / doc["landmarks_csv"], class_names or None)
        class_names = class_names or lms.class_names
        csv_lms = {i: lms.coords[n] for n, i in enumerate(ids)}

    entries = []
    for k, raw in enumerate(doc.get("entries", [])):
        entry_id = str(raw.get("id", k))
        spacing = tuple(float(s) for s in raw.get("spacing", [1.0] * d))
        if len(spacing) != d or min(spacing) <= 0:
            raise FormatError(f"entry {entry_id!r}: spacing {spacing} must be {d} positive values", path)
        landmarks = None
        if raw.get("landmarks") is not None:
            if not class_names:
                class_names = tuple(f"L{c}" for c in range(len(raw["landmarks"])))
            landmarks = _parse_landmarks(raw["landmarks"], len(class_names), d)
        elif csv_lms is not None and entry_id in csv_lms:
            landmarks = csv_lms[entry_id]
        required = _KIND_FIELD[kind]
        if kind == "landmark" and landmarks is None:
            raise FormatError(f"entry {entry_id!r}: landmark manifest entries need landmarks", path)
        if kind in ("heatmap", "mask", "patch") and raw.get(required) is None:
            raise FormatError(f"entry {entry_id!r}: {kind} manifest entries need {required!r}", path)
        patch = None
        if raw.get("patch") is not None:
            patch = PatchSpec(**{k2: tuple(v) for k2, v in raw["patch"].items()})
        known = {"id", "image", "spacing", "landmarks", "heatmap", "mask", "patch"}
        entries.append(ManifestEntry(
            id=entry_id,
            image=root / raw["image"] if raw.get("image") else None,
            spacing=spacing,
            landmarks=landmarks,
            heatmap=root / raw["heatmap"] if raw.get("heatmap") else None,
            mask=root / raw["mask"] if raw.get("mask") else None,
            patch=patch,
            extra={k2: v for k2, v in raw.items() if k2 not in known},
        ))
    return DatasetManifest(kind, d, class_names, entries, resize_to, root)


def write_manifest(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
