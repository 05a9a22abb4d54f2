"""Scans, datasets, the synthetic observer-variation generator and persistence.

The generator draws one jittered ellipse per scan as the true object and
renders a noisy image of it.  Each scan is then "delineated" by one of
``n_styles`` hidden observers: style ``k`` dilates (odd ``k``) or erodes
(even ``k``) the true mask, but only inside the chosen row band of the
object's bounding box.  The image never depends on the style, so the style
can only be inferred from how the reference disagrees with other scans.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from .errors import ConfigError, DataFormatError

SPLIT_TAGS = ("train", "validation", "test")
STYLE_REGIONS = ("top_third", "bottom_third", "full")


@dataclass(frozen=True, eq=False)
class Scan:
    id: str
    image: np.ndarray
    reference_mask: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)
    hidden_style: int | None = None

    def __post_init__(self):
        image = np.array(self.image, dtype=np.float64)
        mask = np.array(self.reference_mask)
        if image.ndim != 2:
            raise DataFormatError(f"image must be 2D, got shape {image.shape}", self.id)
        if image.shape != mask.shape:
            raise DataFormatError(
                f"image {image.shape} and mask {mask.shape} differ in shape", self.id)
        if not np.all((mask == 0) | (mask == 1)):
            bad = np.unique(mask[(mask != 0) & (mask != 1)])
            raise DataFormatError(f"mask values must be 0 or 1, found {bad.tolist()}", self.id)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 2 or min(spacing) <= 0:
            raise DataFormatError(f"spacing must be two positive reals, got {self.spacing}", self.id)
        if self.hidden_style is not None and int(self.hidden_style) < 1:
            raise DataFormatError(f"hidden_style must be >= 1, got {self.hidden_style}", self.id)
        mask = mask.astype(np.uint8)
        image.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "reference_mask", mask)
        object.__setattr__(self, "spacing", spacing)
        if self.hidden_style is not None:
            object.__setattr__(self, "hidden_style", int(self.hidden_style))

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    def __eq__(self, other):
        if not isinstance(other, Scan):
            return NotImplemented
        return (self.id == other.id and self.spacing == other.spacing
                and self.hidden_style == other.hidden_style
                and self.image.shape == other.image.shape
                and self.image.tobytes() == other.image.tobytes()
                and self.reference_mask.tobytes() == other.reference_mask.tobytes())

    __hash__ = None


@dataclass(frozen=True)
class Dataset:
    scans: tuple[Scan, ...]
    split_tag: str = "train"

    def __post_init__(self):
        scans = tuple(self.scans)
        object.__setattr__(self, "scans", scans)
        if self.split_tag not in SPLIT_TAGS:
            raise ConfigError(f"split_tag must be one of {SPLIT_TAGS}, got {self.split_tag!r}")
        seen = set()
        for s in scans:
            if s.id in seen:
                raise DataFormatError("duplicate scan id", s.id)
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.scans)

    def __iter__(self) -> Iterator[Scan]:
        return iter(self.scans)

    def __getitem__(self, i):
        return self.scans[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.scans]

    @property
    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.scans])

    @property
    def masks(self) -> np.ndarray:
        return np.stack([s.reference_mask for s in self.scans])

    @property
    def hidden_styles(self) -> list[int | None]:
        return [s.hidden_style for s in self.scans]

    def subset(self, indices: Sequence[int], split_tag: str | None = None) -> "Dataset":
        return Dataset(tuple(self.scans[i] for i in indices), split_tag or self.split_tag)

    def with_tag(self, split_tag: str) -> "Dataset":
        return replace(self, split_tag=split_tag)


@dataclass
class GeneratorConfig:
    n_scans: int = 40
    image_size: tuple[int, int] = (32, 32)
    n_styles: int = 2
    style_region: str = "top_third"
    style_magnitude_px: int = 3
    noise_sigma: float = 0.1
    seed: int = 0
    spacing: tuple[float, float] = (1.0, 1.0)

    def validate(self) -> None:
        self.image_size = tuple(int(v) for v in self.image_size)
        self.spacing = tuple(float(v) for v in self.spacing)
        if self.n_scans < 1:
            raise ConfigError(f"n_scans must be positive, got {self.n_scans}")
        if len(self.image_size) != 2 or min(self.image_size) < 8:
            raise ConfigError(f"image_size must be (H, W) with H, W >= 8, got {self.image_size}")
        if self.n_styles < 1:
            raise ConfigError(f"n_styles must be >= 1, got {self.n_styles}")
        if self.n_styles > self.n_scans:
            raise ConfigError(f"n_styles ({self.n_styles}) must be <= n_scans ({self.n_scans})")
        if self.style_region not in STYLE_REGIONS:
            raise ConfigError(f"style_region must be one of {STYLE_REGIONS}, got {self.style_region!r}")
        if self.style_magnitude_px < 0:
            raise ConfigError(f"style_magnitude_px must be >= 0, got {self.style_magnitude_px}")
        if not self.style_magnitude_px < min(self.image_size) / 4:
            raise ConfigError(
                f"style_magnitude_px ({self.style_magnitude_px}) must be < min(H, W)/4 "
                f"= {min(self.image_size) / 4}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if len(self.spacing) != 2 or min(self.spacing) <= 0:
            raise ConfigError(f"spacing must be positive, got {self.spacing}")


def row_bands(rmin: int, rmax: int) -> list[tuple[int, int]]:
    """Split rows ``rmin..rmax`` (inclusive) into three half-open bands, top first.

    Band sizes differ by at most one row; surplus rows go to the top band
    first, then the middle one.
    """
    n = rmax - rmin + 1
    base, extra = divmod(n, 3)
    sizes = [base + (1 if i < extra else 0) for i in range(3)]
    bands, lo = [], rmin
    for s in sizes:
        bands.append((lo, lo + s))
        lo += s
    return bands


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius ** 2


def style_amount(style: int, magnitude: int) -> int:
    """Signed pixel amount for a style: +m, -m, +2m, -2m, ..."""
    k = (style + 1) // 2
    return k * magnitude if style % 2 == 1 else -k * magnitude


def apply_style(mask: np.ndarray, style: int, magnitude: int, region: str) -> np.ndarray:
    """Dilate/erode ``mask`` according to ``style``, confined to ``region``."""
    amount = style_amount(style, magnitude)
    mask = np.asarray(mask).astype(bool)
    if amount == 0 or not mask.any():
        return mask.astype(np.uint8)
    se = _disk(abs(amount))
    if amount > 0:
        changed = ndimage.binary_dilation(mask, structure=se)
    else:
        changed = ndimage.binary_erosion(mask, structure=se, border_value=0)
    if region == "full":
        return changed.astype(np.uint8)
    rows = np.flatnonzero(mask.any(axis=1))
    bands = row_bands(int(rows[0]), int(rows[-1]))
    lo, hi = bands[0] if region == "top_third" else bands[2]
    out = mask.copy()
    out[lo:hi] = changed[lo:hi]
    return out.astype(np.uint8)


def _blob(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    ry = rng.uniform(H / 6, H / 3)
    rx = rng.uniform(W / 6, W / 3)
    cy = (H - 1) / 2 + rng.uniform(-H / 8, H / 8)
    cx = (W - 1) / 2 + rng.uniform(-W / 8, W / 8)
    amps = rng.uniform(0.0, 0.06, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    yy, xx = np.mgrid[0:H, 0:W]
    dy, dx = (yy - cy) / ry, (xx - cx) / rx
    theta = np.arctan2(dy, dx)
    radial = 1.0 + sum(a * np.cos((k + 2) * theta + p)
                       for k, (a, p) in enumerate(zip(amps, phases)))
    mask = np.hypot(dy, dx) <= radial
    return mask.astype(np.uint8)


def generate_synthetic(config: GeneratorConfig) -> Dataset:
    config.validate()
    H, W = config.image_size
    root = np.random.SeedSequence(config.seed)
    style_rng, *scan_seeds = [np.random.default_rng(s) for s in root.spawn(config.n_scans + 1)]
    styles = np.arange(config.n_scans) % config.n_styles + 1
    style_rng.shuffle(styles)
    width = len(str(config.n_scans - 1))
    scans = []
    for i, rng in enumerate(scan_seeds):
        true_mask = _blob(rng, H, W)
        fg, bg = rng.uniform(0.6, 0.8), rng.uniform(0.2, 0.4)
        image = np.where(true_mask, fg, bg) + rng.normal(0.0, config.noise_sigma, (H, W))
        image = np.clip(image, 0.0, 1.0)
        ref = apply_style(true_mask, int(styles[i]), config.style_magnitude_px,
                          config.style_region)
        scans.append(Scan(f"scan{i:0{width}d}", image, ref, config.spacing, int(styles[i])))
    return Dataset(tuple(scans), "train")


def true_masks(config: GeneratorConfig) -> list[np.ndarray]:
    """Unstyled object masks for ``config`` (same draws as :func:`generate_synthetic`)."""
    config.validate()
    H, W = config.image_size
    root = np.random.SeedSequence(config.seed)
    rngs = [np.random.default_rng(s) for s in root.spawn(config.n_scans + 1)][1:]
    return [_blob(rng, H, W) for rng in rngs]


# -- splitting ---------------------------------------------------------------

def _split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [f * n for f in fractions]
    sizes = [math.floor(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def _allocate(group_sizes: list[int], split_sizes: list[int]) -> np.ndarray:
    """Integer table with the given margins, every cell the floor or ceil of proportional."""
    n = sum(group_sizes)
    ideal = np.outer(group_sizes, split_sizes) / n
    table = np.floor(ideal + 1e-12).astype(int)
    row_need = np.array(group_sizes) - table.sum(axis=1)
    col_need = np.array(split_sizes) - table.sum(axis=0)
    G, S = table.shape
    if row_need.sum() == 0:
        return table
    # source -> group -> split -> sink; unit capacity only on fractional cells
    size = 2 + G + S
    cap = np.zeros((size, size), dtype=np.int32)
    src, sink = 0, size - 1
    for g in range(G):
        cap[src, 1 + g] = row_need[g]
        for s in range(S):
            if ideal[g, s] - table[g, s] > 1e-12:
                cap[1 + g, 1 + G + s] = 1
    for s in range(S):
        cap[1 + G + s, sink] = col_need[s]
    flow = maximum_flow(csr_matrix(cap), src, sink).flow.toarray()
    table += np.maximum(flow[1:1 + G, 1 + G:1 + G + S], 0)
    return table


def split_dataset(d: Dataset, fractions: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0,
                  stratify: bool = True) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint train/validation/test split, stratified by hidden style when known."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0:
        raise ConfigError(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(d)
    sizes = _split_sizes(n, fractions)
    if min(sizes) == 0:
        raise ConfigError(f"split sizes {sizes} for {n} scans leave a split empty")
    rng = np.random.default_rng(seed)
    styles = d.hidden_styles
    if stratify and all(s is not None for s in styles):
        keys = sorted(set(styles))
    else:
        keys = [None]
        styles = [None] * n
    groups = [[i for i in range(n) if styles[i] == k] for k in keys]
    table = _allocate([len(g) for g in groups], sizes)
    assignment = np.empty(n, dtype=int)
    for g, members in enumerate(groups):
        members = list(rng.permutation(members))
        start = 0
        for s in range(3):
            for i in members[start:start + table[g, s]]:
                assignment[i] = s
            start += table[g, s]
    return tuple(d.subset(np.flatnonzero(assignment == s).tolist(), SPLIT_TAGS[s])
                 for s in range(3))


# -- persistence -------------------------------------------------------------

RASTER_MAGIC = b"PSEG"
RASTER_VERSION = 1
DTYPE_TAGS = {0: np.dtype("u1"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sHHHH4x")  # 16 bytes


def write_raster(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"raster must be 2D, got {arr.shape}")
    tag = 0 if arr.dtype == np.uint8 else 1
    data = np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag])
    H, W = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RASTER_MAGIC, RASTER_VERSION, H, W, tag))
        fh.write(data.tobytes())


def read_raster(path, record_id=None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"raster {path} is truncated", record_id)
    magic, version, H, W, tag = _HEADER.unpack_from(raw)
    if magic != RASTER_MAGIC:
        raise DataFormatError(f"raster {path} has bad magic {magic!r}", record_id)
    if version != RASTER_VERSION:
        raise DataFormatError(f"raster {path} has unsupported version {version}", record_id)
    if tag not in DTYPE_TAGS:
        raise DataFormatError(f"raster {path} has unknown dtype tag {tag}", record_id)
    dtype = DTYPE_TAGS[tag]
    expected = _HEADER.size + H * W * dtype.itemsize
    if len(raw) != expected:
        raise DataFormatError(f"raster {path} has {len(raw)} bytes, expected {expected}",
                              record_id)
    return np.frombuffer(raw, dtype=dtype, offset=_HEADER.size).reshape(H, W).copy()


def save_dataset(d: Dataset, path) -> None:
    """Write ``d`` as a directory: ``manifest.json`` plus two rasters per scan."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for s in d.scans:
        write_raster(root / f"{s.id}.image.pseg", s.image)
        write_raster(root / f"{s.id}.mask.pseg", s.reference_mask.astype(np.uint8))
        records.append({"id": s.id, "spacing": list(s.spacing),
                        "hidden_style": s.hidden_style, "split_tag": d.split_tag})
    manifest = {"format": "pseg-dataset", "version": 1, "split_tag": d.split_tag,
                "scans": records}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(path) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise DataFormatError(f"{root} has no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"manifest is not valid JSON: {exc}") from None
    scans, seen = [], set()
    for rec in manifest.get("scans", []):
        sid = rec.get("id")
        if not isinstance(sid, str) or not sid:
            raise DataFormatError(f"record without a valid id: {rec!r}")
        if sid in seen:
            raise DataFormatError("duplicate scan id", sid)
        seen.add(sid)
        image = read_raster(root / f"{sid}.image.pseg", sid)
        mask = read_raster(root / f"{sid}.mask.pseg", sid)
        try:
            scans.append(Scan(sid, image, mask, tuple(rec.get("spacing", (1.0, 1.0))),
                              rec.get("hidden_style")))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DataFormatError):
                raise
            raise DataFormatError(str(exc), sid) from None
    try:
        return Dataset(tuple(scans), manifest.get("split_tag", "train"))
    except ConfigError as exc:
        raise DataFormatError(str(exc)) from None
