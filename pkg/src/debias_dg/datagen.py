"""Synthetic multi-domain data, leave-one-domain-out splits and dataset files.

Two generators are provided:

* :func:`gen_biased_domains` builds domains that share a class-dependent
  "common" feature block and each carry a private "bias" block that is
  label-correlated only inside that domain;
* :func:`gen_rotated` builds one domain per rotation angle from procedural
  16x16 glyphs (or from user-supplied IDX image files).
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
FORMAT_NAME = "debias-dg-dataset"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """A dataset manifest or data file is malformed."""


@dataclass
class DomainDataset:
    """One domain's rows, ordered train | val | test.

    ``y`` holds integer class labels (shape ``(n,)``) or a 0/1 label matrix
    for multi-label tasks.  ``entity`` groups rows that must share a split and
    ``sample_id`` is unique across all domains of a generated collection.
    """

    domain_id: Union[int, str]
    X: np.ndarray
    y: np.ndarray
    entity: np.ndarray
    sample_id: np.ndarray
    splits: dict
    n_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.X.shape[0]
        for name, arr in (("y", self.y), ("entity", self.entity), ("sample_id", self.sample_id)):
            if arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} rows, X has {n}")
        check_split_ranges(self.splits, n)

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def is_multilabel(self) -> bool:
        return self.y.ndim == 2

    def split_slice(self, name: str) -> slice:
        lo, hi = self.splits[name]
        return slice(lo, hi)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        s = self.split_slice(name)
        return self.X[s], self.y[s]

    def equals(self, other: "DomainDataset") -> bool:
        return (self.domain_id == other.domain_id and self.n_classes == other.n_classes
                and self.splits == other.splits and self.provenance == other.provenance
                and self.X.dtype == other.X.dtype and self.X.tobytes() == other.X.tobytes()
                and self.y.tobytes() == other.y.tobytes() and self.y.shape == other.y.shape
                and self.entity.tobytes() == other.entity.tobytes()
                and self.sample_id.tobytes() == other.sample_id.tobytes())


def check_split_ranges(splits: dict, n: int) -> None:
    """Split ranges must be ordered, non-overlapping and cover ``[0, n)``."""
    if set(splits) != set(SPLITS):
        raise DatasetFormatError(f"splits must be exactly {SPLITS}, got {sorted(splits)}")
    pos = 0
    for name in SPLITS:
        lo, hi = (int(v) for v in splits[name])
        if lo != pos or hi < lo:
            raise DatasetFormatError(
                f"split {name!r} range [{lo}, {hi}) overlaps or leaves a gap (expected to start at {pos})")
        pos = hi
    if pos != n:
        raise DatasetFormatError(f"split ranges cover {pos} rows but the dataset has {n}")


def assign_splits(n_entities: int, rng: np.random.Generator,
                  fractions: Sequence[float] = SPLIT_FRACTIONS) -> np.ndarray:
    """Split tag (0, 1, 2) for each entity, in a random order with rounded 7:1:2 counts."""
    n_train = int(round(fractions[0] * n_entities))
    n_val = int(round(fractions[1] * n_entities))
    tags = np.full(n_entities, 2)
    tags[:n_train] = 0
    tags[n_train:n_train + n_val] = 1
    return tags[rng.permutation(n_entities)]


def _build(domain_id, X, y, entity, sample_id, n_classes, provenance, rng) -> DomainDataset:
    """Order rows train | val | test by entity-level split assignment."""
    ent_values, ent_index = np.unique(entity, return_inverse=True)
    tags = assign_splits(len(ent_values), rng)[ent_index]
    order = np.concatenate([np.flatnonzero(tags == t) for t in range(3)])
    counts = [int(np.sum(tags == t)) for t in range(3)]
    bounds = np.cumsum([0] + counts)
    splits = {name: (int(bounds[k]), int(bounds[k + 1])) for k, name in enumerate(SPLITS)}
    return DomainDataset(domain_id, np.ascontiguousarray(X[order]), np.ascontiguousarray(y[order]),
                         entity[order].astype(np.int64), sample_id[order].astype(np.int64), splits,
                         n_classes, provenance)


# --------------------------------------------------------------------------
# confounded feature-block generator


@dataclass
class ConfoundSpec:
    """Parameters of the confounded multi-domain generator.

    Features are ``[common | slot_0 | ... | slot_{n_domains-1}]``.  Domain
    ``i`` writes ``rho[i] * mu * dir_i(y)`` into its own slot; other slots are
    noise.  The domain at index ``external`` writes its ``rho`` into every
    slot (``external_mode="all-slots"``) or only its own (``"own-slot"``).
    ``style`` adds a fixed label-independent offset to each domain's own slot,
    a domain signature of the kind acquisition differences produce.
    """

    n_domains: int = 4
    d_common: int = 8
    d_bias: int = 8
    mu: float = 1.0
    rho: tuple = (1.0, 1.0, 1.0, -0.5)
    sigma: float = 1.0
    n_per_domain: int = 10000
    n_classes: int = 2
    external: Optional[int] = 3
    external_mode: str = "all-slots"
    style: float = 0.0
    group_size: int = 1

    def __post_init__(self):
        self.rho = tuple(float(r) for r in self.rho)
        if self.n_domains < 1:
            raise ValueError("n_domains must be >= 1")
        if len(self.rho) != self.n_domains:
            raise ValueError(f"need one rho per domain ({self.n_domains}), got {len(self.rho)}")
        if any(not -1.0 <= r <= 1.0 for r in self.rho):
            raise ValueError("rho values must lie in [-1, 1]")
        if self.d_common < 1 or self.d_bias < 1:
            raise ValueError("feature block dims must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.external is not None and not 0 <= self.external < self.n_domains:
            raise ValueError(f"external index {self.external} out of range")
        if self.external_mode not in ("all-slots", "own-slot"):
            raise ValueError(f"unknown external_mode {self.external_mode!r}")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")

    @property
    def n_features(self) -> int:
        return self.d_common + self.n_domains * self.d_bias

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rho"] = list(self.rho)
        return d


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def class_directions(spec: ConfoundSpec, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The fixed per-seed unit vectors: common ``(C, d_c)``, bias ``(N, C, d_b)``, style ``(N, d_b)``."""
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    common = _unit_rows(rng, spec.n_classes, spec.d_common)
    bias = np.stack([_unit_rows(rng, spec.n_classes, spec.d_bias) for _ in range(spec.n_domains)])
    style = _unit_rows(rng, spec.n_domains, spec.d_bias)
    return common, bias, style


def gen_biased_domains(spec: ConfoundSpec, seed: int) -> list[DomainDataset]:
    common_dir, bias_dir, style_dir = class_directions(spec, seed)
    domain_seeds = np.random.SeedSequence(seed).spawn(1 + spec.n_domains)[1:]
    out = []
    n = spec.n_per_domain
    for i, ss in enumerate(domain_seeds):
        rng = np.random.default_rng(ss)
        y = rng.integers(spec.n_classes, size=n)
        x = np.empty((n, spec.n_features))
        x[:, :spec.d_common] = spec.mu * common_dir[y] + spec.sigma * rng.normal(size=(n, spec.d_common))
        for k in range(spec.n_domains):
            lo = spec.d_common + k * spec.d_bias
            block = spec.sigma * rng.normal(size=(n, spec.d_bias))
            writes = k == i or (i == spec.external and spec.external_mode == "all-slots")
            if writes:
                block += spec.rho[i] * spec.mu * bias_dir[k][y]
            if k == i:
                block += spec.style * style_dir[i]
            x[:, lo:lo + spec.d_bias] = block
        entity = np.arange(n) // spec.group_size + i * n
        sample_id = np.arange(n) + i * n
        prov = {"generator": "biased", "seed": int(seed), "domain_index": i, "spec": spec.to_dict()}
        out.append(_build(i, x, y, entity, sample_id, spec.n_classes, prov, rng))
    return out


# --------------------------------------------------------------------------
# rotated glyphs

# seven-segment strokes in a unit box, (x0, y0, x1, y1) with y pointing down
_SEGMENTS = {
    "a": (0.2, 0.1, 0.8, 0.1), "b": (0.8, 0.1, 0.8, 0.5), "c": (0.8, 0.5, 0.8, 0.9),
    "d": (0.2, 0.9, 0.8, 0.9), "e": (0.2, 0.5, 0.2, 0.9), "f": (0.2, 0.1, 0.2, 0.5),
    "g": (0.2, 0.5, 0.8, 0.5),
}
GLYPHS = ("abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abfgcd")


@dataclass
class RotatedSpec:
    angles: tuple = (0.0, 15.0, 30.0, 45.0, 60.0, 75.0)
    n_per_domain: int = 1000
    n_classes: int = 10
    size: int = 16
    thickness: float = 0.09
    jitter: float = 0.08
    noise: float = 0.05

    def __post_init__(self):
        self.angles = tuple(float(a) for a in self.angles)
        if not 2 <= self.n_classes <= len(GLYPHS):
            raise ValueError(f"n_classes must be in [2, {len(GLYPHS)}]")
        if self.size < 4:
            raise ValueError("size must be >= 4")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["angles"] = list(self.angles)
        return d


def _segment_distance(px, py, seg):
    x0, y0, x1, y1 = seg
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def render_glyphs(labels: np.ndarray, spec: RotatedSpec, rng: np.random.Generator) -> np.ndarray:
    """Anti-aliased stroke glyphs with random shift, scale, slant and stroke width."""
    n, s = labels.shape[0], spec.size
    centers = (np.arange(s) + 0.5) / s
    gx, gy = np.meshgrid(centers, centers)
    shift = rng.uniform(-spec.jitter, spec.jitter, size=(n, 2))
    scale = rng.uniform(0.85, 1.1, size=n)
    slant = rng.uniform(-0.15, 0.15, size=n)
    width = spec.thickness * rng.uniform(0.8, 1.25, size=n)
    images = np.empty((n, s, s))
    aa = 0.5 / s
    for k in range(n):
        # map pixel centres back into glyph coordinates
        v = (gy - 0.5 - shift[k, 1]) / scale[k] + 0.5
        u = (gx - 0.5 - shift[k, 0]) / scale[k] + 0.5 - slant[k] * (v - 0.5)
        dist = np.full((s, s), np.inf)
        for name in GLYPHS[labels[k]]:
            dist = np.minimum(dist, _segment_distance(u, v, _SEGMENTS[name]))
        images[k] = np.clip((width[k] - dist) / aa + 0.5, 0.0, 1.0)
    return images


def rotate_image(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate counter-clockwise about the image centre with bilinear interpolation.

    Pixels whose source falls outside the image are zero.  Source coordinates
    within 1e-9 of the pixel grid are snapped, so multiples of 90 degrees
    permute pixels exactly.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output (row, col) -> source (row, col)
    dx, dy = xx - cx, yy - cy
    src_x = c * dx - s * dy + cx
    src_y = s * dx + c * dy + cy
    for arr in (src_x, src_y):
        near = np.abs(arr - np.round(arr)) < 1e-9
        arr[near] = np.round(arr[near])
    x0 = np.floor(src_x).astype(int)
    y0 = np.floor(src_y).astype(int)
    fx, fy = src_x - x0, src_y - y0
    padded = np.zeros((h + 2, w + 2))
    padded[1:-1, 1:-1] = img

    def at(r, q):
        r = np.clip(r + 1, 0, h + 1)
        q = np.clip(q + 1, 0, w + 1)
        return padded[r, q]

    out = ((1 - fy) * (1 - fx) * at(y0, x0) + (1 - fy) * fx * at(y0, x0 + 1)
           + fy * (1 - fx) * at(y0 + 1, x0) + fy * fx * at(y0 + 1, x0 + 1))
    outside = (src_x < -1) | (src_x > w) | (src_y < -1) | (src_y > h)
    out[outside] = 0.0
    return out


def gen_rotated(spec: RotatedSpec, seed: int, source: str = "procedural",
                idx_images: Optional[Union[str, Path]] = None,
                idx_labels: Optional[Union[str, Path]] = None) -> list[DomainDataset]:
    """One domain per rotation angle; features are flattened images in [0, 1]."""
    if source not in ("procedural", "idx-files"):
        raise ValueError(f"unknown source {source!r}")
    seeds = np.random.SeedSequence(seed).spawn(len(spec.angles) + 1)
    if source == "idx-files":
        if idx_images is None or idx_labels is None:
            raise ValueError("idx-files source needs idx_images and idx_labels")
        images = read_idx(idx_images).astype(np.float64)
        labels = read_idx(idx_labels).astype(np.int64).reshape(-1)
        if images.ndim != 3 or images.shape[0] != labels.shape[0]:
            raise DatasetFormatError(f"expected (n, h, w) images matching {labels.shape[0]} labels, "
                                     f"got {images.shape}")
        if images.max() > 1.0:
            images = images / 255.0
        n_classes = int(labels.max()) + 1
        owner = np.random.default_rng(seeds[-1]).permutation(images.shape[0]) % len(spec.angles)
    out = []
    for i, angle in enumerate(spec.angles):
        rng = np.random.default_rng(seeds[i])
        if source == "procedural":
            y = rng.integers(spec.n_classes, size=spec.n_per_domain)
            base = render_glyphs(y, spec, rng)
            n_classes = spec.n_classes
            ids = np.arange(y.shape[0]) + i * spec.n_per_domain
        else:
            rows = np.flatnonzero(owner == i)
            y, base = labels[rows], images[rows]
            ids = rows
        rotated = np.stack([rotate_image(im, angle) for im in base])
        if source == "procedural" and spec.noise > 0:
            rotated = np.clip(rotated + spec.noise * rng.normal(size=rotated.shape), 0.0, 1.0)
        x = rotated.reshape(rotated.shape[0], -1)
        prov = {"generator": "rotated", "source": source, "seed": int(seed), "angle": angle,
                "spec": spec.to_dict()}
        out.append(_build(int(round(angle)), x, y, ids.copy(), ids, n_classes, prov, rng))
    return out


# --------------------------------------------------------------------------
# IDX files

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DatasetFormatError(f"{path}: offset 0: file too short for an IDX header ({len(raw)} bytes)")
    if raw[0] != 0 or raw[1] != 0:
        raise DatasetFormatError(f"{path}: offset 0: bad magic bytes {raw[:2].hex()}")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise DatasetFormatError(f"{path}: offset 2: unknown element type 0x{code:02x}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DatasetFormatError(f"{path}: offset 4: header declares {ndim} dims but file ends at {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = np.dtype(_IDX_TYPES[code])
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    found = len(raw) - header_end
    if found != expected:
        raise DatasetFormatError(f"{path}: offset {header_end}: expected {expected} data bytes for "
                                 f"dims {dims}, found {found}")
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    for code, name in _IDX_TYPES.items():
        if np.dtype(name).newbyteorder("=") == array.dtype.newbyteorder("="):
            break
    else:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(np.dtype(_IDX_TYPES[code])).tobytes())


# --------------------------------------------------------------------------
# leave-one-domain-out


def lodo_split(datasets: Sequence[DomainDataset], held_out, min_internal: int = 2):
    """``(internal, external)`` with ``held_out`` (a domain id) as the only external domain."""
    ids = [ds.domain_id for ds in datasets]
    if held_out not in ids:
        raise KeyError(f"held-out domain {held_out!r} not among {ids}")
    internal = [ds for ds in datasets if ds.domain_id != held_out]
    external = [ds for ds in datasets if ds.domain_id == held_out]
    if len(internal) < min_internal:
        raise ValueError(f"need at least {min_internal} internal domains, got {len(internal)}")
    return internal, external


def lodo_plan(datasets: Sequence[DomainDataset]) -> list:
    return [ds.domain_id for ds in datasets]


# --------------------------------------------------------------------------
# dataset files
#
# <stem>.json      manifest
# <stem>.x.f64     n_rows x n_features float64 little-endian, row-major
# <stem>.y.i64     n_rows x (label_columns + 2) int64 little-endian, row-major;
#                  columns are the label(s), then entity id, then sample id


def write_dataset(ds: DomainDataset, directory, stem: Optional[str] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or f"domain_{ds.domain_id}"
    labels = ds.y.reshape(ds.n_rows, -1).astype(np.int64)
    table = np.concatenate([labels, ds.entity[:, None], ds.sample_id[:, None]], axis=1)
    x_name, y_name = f"{stem}.x.f64", f"{stem}.y.i64"
    (directory / x_name).write_bytes(np.ascontiguousarray(ds.X, dtype="<f8").tobytes())
    (directory / y_name).write_bytes(np.ascontiguousarray(table, dtype="<i8").tobytes())
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "domain_id": ds.domain_id,
        "n_rows": ds.n_rows,
        "n_features": int(ds.X.shape[1]),
        "n_classes": int(ds.n_classes),
        "label_columns": int(labels.shape[1]),
        "multilabel": ds.is_multilabel,
        "splits": {k: list(v) for k, v in ds.splits.items()},
        "provenance": ds.provenance,
        "files": {"matrix": x_name, "labels": y_name},
    }
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(manifest_path) -> DomainDataset:
    manifest_path = Path(manifest_path)
    try:
        m = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{manifest_path}: not valid JSON ({exc})") from exc
    if m.get("format") != FORMAT_NAME or m.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{manifest_path}: not a {FORMAT_NAME} v{FORMAT_VERSION} manifest")
    n, d, k = int(m["n_rows"]), int(m["n_features"]), int(m["label_columns"])
    base = manifest_path.parent
    x_raw = (base / m["files"]["matrix"]).read_bytes()
    y_raw = (base / m["files"]["labels"]).read_bytes()
    if len(x_raw) != n * d * 8:
        raise DatasetFormatError(f"{m['files']['matrix']}: expected {n * d * 8} bytes "
                                 f"({n} x {d} float64), found {len(x_raw)}")
    if len(y_raw) != n * (k + 2) * 8:
        raise DatasetFormatError(f"{m['files']['labels']}: expected {n * (k + 2) * 8} bytes "
                                 f"({n} x {k + 2} int64), found {len(y_raw)}")
    splits = {name: tuple(int(v) for v in rng) for name, rng in m["splits"].items()}
    check_split_ranges(splits, n)
    x = np.frombuffer(x_raw, dtype="<f8").reshape(n, d).astype(np.float64)
    table = np.frombuffer(y_raw, dtype="<i8").reshape(n, k + 2).astype(np.int64)
    y = table[:, :k] if m.get("multilabel") else table[:, 0].copy()
    return DomainDataset(m["domain_id"], x, np.ascontiguousarray(y), table[:, k].copy(),
                         table[:, k + 1].copy(), splits, int(m["n_classes"]), m.get("provenance", {}))


def write_collection(datasets: Sequence[DomainDataset], directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = [write_dataset(ds, directory).name for ds in datasets]
    path = directory / "collection.json"
    path.write_text(json.dumps({"format": FORMAT_NAME + "-collection", "datasets": entries},
                               indent=2) + "\n")
    return path


def read_collection(directory) -> list[DomainDataset]:
    directory = Path(directory)
    path = directory / "collection.json"
    if not path.exists():
        raise FileNotFoundError(f"no collection.json in {directory}")
    entries = json.loads(path.read_text())["datasets"]
    return [read_dataset(directory / e) for e in entries]
