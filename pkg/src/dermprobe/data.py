"""Corpus ingestion, palette masks, balanced subset plans, synthetic data.

Corpus layout on disk::

    root/
      images/   RGB rasters
      masks/    RGBA rasters (optional per sample)
      metadata.csv

``metadata.csv`` is UTF-8, comma-separated, with header
``id,image_path,mask_path,tone_bin,malignant,disease``. Paths are relative
to the root; ``mask_path`` may be empty (classification-only sample);
``malignant`` is 0 or 1; ``tone_bin`` is one of I-II, III-IV, V-VI.

Class indices are fixed package-wide: 0=background, 1=lesion, 2=skin,
3=marker, 4=ruler. Mask rasters encode them as exact RGBA colors (lesion
red, skin green, marker purple, ruler blue, background fully transparent).

Images are resized bilinearly; masks are decoded first and resized
nearest-neighbor on the class-index map so classes never blend.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CapacityError, CorpusValidationError, DataError, MaskDecodeError, ParameterError

CLASS_NAMES = ("background", "lesion", "skin", "marker", "ruler")
CLASS_COUNT = len(CLASS_NAMES)
TONE_BINS = ("I-II", "III-IV", "V-VI")
TONE_SLUGS = {"I-II": "light", "III-IV": "medium", "V-VI": "dark"}

METADATA_HEADER = ["id", "image_path", "mask_path", "tone_bin", "malignant", "disease"]

SUBSET_PERCENTS = (5, 10, 15, 20)
# Per (tone, malignancy) cell: samples in each nested training subset.
SUBSET_CELL_COUNTS = {5: 5, 10: 10, 15: 15, 20: 20}
SPLIT_CELL_COUNT = 5  # validation and test each take 5 per cell


@dataclass(frozen=True)
class MaskPalette:
    """RGBA color per opaque class; any pixel with alpha 0 is background."""

    lesion: tuple = (255, 0, 0, 255)
    skin: tuple = (0, 255, 0, 255)
    marker: tuple = (128, 0, 128, 255)
    ruler: tuple = (0, 0, 255, 255)

    def class_colors(self) -> dict[int, tuple]:
        return {1: self.lesion, 2: self.skin, 3: self.marker, 4: self.ruler}


DEFAULT_PALETTE = MaskPalette()


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image_path: str
    mask_path: str | None
    tone_bin: str
    malignant: bool
    disease: str


@dataclass(frozen=True)
class SubsetPlan:
    """Nested balanced training subsets plus fixed validation/test splits."""

    seed: int
    subsets: dict[int, tuple[str, ...]]
    validation: tuple[str, ...]
    test: tuple[str, ...]


def load_corpus(metadata_path, root=None) -> list[SampleRecord]:
    """Read and validate a corpus metadata table.

    All row problems are collected and raised together. Image files must
    exist and be readable rasters.
    """
    metadata_path = Path(metadata_path)
    root = Path(root) if root is not None else metadata_path.parent
    problems: list[str] = []
    records: list[SampleRecord] = []
    seen: set[str] = set()
    with open(metadata_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METADATA_HEADER:
            raise CorpusValidationError(
                [f"bad header {reader.fieldnames}, expected {METADATA_HEADER}"]
            )
        for lineno, row in enumerate(reader, start=2):
            rid = (row["id"] or "").strip()
            where = f"row {lineno} (id={rid!r})"
            if not rid:
                problems.append(f"{where}: empty id")
                continue
            if rid in seen:
                problems.append(f"{where}: duplicate id")
                continue
            seen.add(rid)
            if row["tone_bin"] not in TONE_BINS:
                problems.append(f"{where}: unknown tone_bin {row['tone_bin']!r}")
                continue
            if row["malignant"] not in ("0", "1"):
                problems.append(f"{where}: malignant must be 0 or 1, got {row['malignant']!r}")
                continue
            image_path = root / row["image_path"]
            try:
                with Image.open(image_path) as img:
                    img.verify()
            except Exception as exc:
                problems.append(f"{where}: unreadable image {row['image_path']!r} ({exc})")
                continue
            mask_path = row["mask_path"].strip() or None
            records.append(
                SampleRecord(
                    id=rid,
                    image_path=row["image_path"],
                    mask_path=mask_path,
                    tone_bin=row["tone_bin"],
                    malignant=row["malignant"] == "1",
                    disease=row["disease"],
                )
            )
    if problems:
        raise CorpusValidationError(problems)
    return records


def decode_mask(mask, palette: MaskPalette = DEFAULT_PALETTE) -> np.ndarray:
    """Decode an RGBA mask raster to an (H, W) class-index map.

    Any pixel with alpha 0 is background; opaque pixels must match a palette
    color exactly.
    """
    if isinstance(mask, Image.Image):
        mask = np.asarray(mask.convert("RGBA"))
    mask = np.asarray(mask)
    if mask.ndim != 3 or mask.shape[2] != 4:
        raise ParameterError(f"mask must be (H, W, 4) RGBA, got shape {mask.shape}")
    out = np.zeros(mask.shape[:2], dtype=np.int64)
    matched = mask[..., 3] == 0
    for idx, color in palette.class_colors().items():
        hit = np.all(mask == np.asarray(color, dtype=mask.dtype), axis=-1)
        out[hit] = idx
        matched |= hit
    if not matched.all():
        ys, xs = np.nonzero(~matched)
        y, x = int(ys[0]), int(xs[0])
        raise MaskDecodeError(
            f"{(~matched).sum()} off-palette pixel(s); first at (y={y}, x={x}) "
            f"with RGBA {tuple(int(v) for v in mask[y, x])}"
        )
    return out


def encode_mask(class_map: np.ndarray, palette: MaskPalette = DEFAULT_PALETTE) -> np.ndarray:
    """Inverse of decode_mask: class-index map to an RGBA array."""
    class_map = np.asarray(class_map)
    if class_map.min() < 0 or class_map.max() >= CLASS_COUNT:
        raise ParameterError("class map values must be in [0, 5)")
    lut = np.zeros((CLASS_COUNT, 4), dtype=np.uint8)
    for idx, color in palette.class_colors().items():
        lut[idx] = color
    return lut[class_map]


def load_image_array(path, resolution: int | None = None) -> np.ndarray:
    """Load an RGB image as float32 (3, H, W) in [-1, 1], optionally resized."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if resolution is not None and img.size != (resolution, resolution):
            img = img.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1)) / 127.5 - 1.0


def load_mask_array(path, resolution: int | None = None, palette: MaskPalette = DEFAULT_PALETTE) -> np.ndarray:
    """Load and decode a mask, nearest-neighbor resized on the index map."""
    with Image.open(path) as img:
        class_map = decode_mask(img, palette)
    if resolution is not None and class_map.shape != (resolution, resolution):
        h, w = class_map.shape
        ys = ((np.arange(resolution) + 0.5) * h / resolution).astype(np.int64).clip(0, h - 1)
        xs = ((np.arange(resolution) + 0.5) * w / resolution).astype(np.int64).clip(0, w - 1)
        class_map = class_map[np.ix_(ys, xs)]
    return class_map


def _cells(records):
    by_cell: dict[tuple[str, bool], list[SampleRecord]] = {
        (tone, mal): [] for tone in TONE_BINS for mal in (True, False)
    }
    for rec in records:
        by_cell[(rec.tone_bin, rec.malignant)].append(rec)
    return by_cell


def draw_subset_plan(records, seed: int) -> SubsetPlan:
    """Draw nested tone- and malignancy-balanced training subsets.

    Per (tone, malignancy) cell: a seeded shuffle, the first 20 samples form
    the 20% subset with the smaller subsets as prefixes (so 5% include 10%
    include 15% include 20% holds exactly), then 5 for validation and 5 for
    test. Validation and test are therefore 30 samples each, 10 per tone,
    malignancy-balanced, and disjoint from training and from each other.
    """
    need = SUBSET_CELL_COUNTS[20] + 2 * SPLIT_CELL_COUNT
    rng = np.random.default_rng(seed)
    by_cell = _cells(records)
    subsets: dict[int, list[str]] = {p: [] for p in SUBSET_PERCENTS}
    validation: list[str] = []
    test: list[str] = []
    for tone in TONE_BINS:
        for mal in (True, False):
            cell = sorted(by_cell[(tone, mal)], key=lambda r: r.id)
            if len(cell) < need:
                raise CapacityError(
                    f"cell tone_bin={tone} malignant={int(mal)} has {len(cell)} "
                    f"samples, need {need}"
                )
            order = rng.permutation(len(cell))
            ids = [cell[i].id for i in order]
            for pct in SUBSET_PERCENTS:
                subsets[pct].extend(ids[: SUBSET_CELL_COUNTS[pct]])
            offset = SUBSET_CELL_COUNTS[20]
            validation.extend(ids[offset : offset + SPLIT_CELL_COUNT])
            test.extend(ids[offset + SPLIT_CELL_COUNT : offset + 2 * SPLIT_CELL_COUNT])
    return SubsetPlan(
        seed=seed,
        subsets={p: tuple(v) for p, v in subsets.items()},
        validation=tuple(validation),
        test=tuple(test),
    )


def save_plan(plan: SubsetPlan, path) -> None:
    import json

    doc = {
        "seed": plan.seed,
        "subsets": {str(p): list(ids) for p, ids in plan.subsets.items()},
        "validation": list(plan.validation),
        "test": list(plan.test),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_plan(path) -> SubsetPlan:
    """Load a previously saved (or externally supplied) plan verbatim."""
    import json

    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return SubsetPlan(
        seed=int(doc.get("seed", -1)),
        subsets={int(p): tuple(ids) for p, ids in doc["subsets"].items()},
        validation=tuple(doc["validation"]),
        test=tuple(doc["test"]),
    )


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------

_TONE_RGB = {
    "I-II": (232, 198, 172),
    "III-IV": (186, 138, 106),
    "V-VI": (112, 78, 56),
}
_BACKGROUND_RGB = (46, 38, 34)
_RULER_RGB = (228, 226, 220)
_TICK_RGB = (62, 60, 58)
_MARKER_RGB = (128, 44, 138)
_LESION_BENIGN_RGB = (172, 108, 88)
_LESION_MALIGNANT_RGB = (92, 44, 42)


def _blotch_field(rng, yy, xx, centers: int, radius: float) -> np.ndarray:
    field = np.zeros(yy.shape, dtype=np.float64)
    for _ in range(centers):
        cy = rng.uniform(yy.min(), yy.max())
        cx = rng.uniform(xx.min(), xx.max())
        amp = rng.uniform(-1.0, 1.0)
        field += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
    return field


def render_synthetic_sample(
    rng: np.random.Generator,
    resolution: int,
    tone_bin: str,
    malignant: bool,
    with_ruler: bool = True,
    with_marker: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Render one (RGB image, class map) pair.

    Skin patch over a dark table, one elliptical lesion (malignant lesions
    get irregular high-contrast borders and stronger blotching), plus a
    tick-marked ruler strip and a marker dot.
    """
    r = resolution
    yy, xx = np.mgrid[0:r, 0:r].astype(np.float64)
    cls = np.zeros((r, r), dtype=np.int64)

    # Skin: rotated ellipse around the image center.
    scy, scx = (rng.uniform(0.47, 0.53) * r for _ in range(2))
    say, sax = (rng.uniform(0.42, 0.47) * r for _ in range(2))
    theta = rng.uniform(0.0, np.pi)
    ry = (yy - scy) * np.cos(theta) - (xx - scx) * np.sin(theta)
    rx = (yy - scy) * np.sin(theta) + (xx - scx) * np.cos(theta)
    skin = (ry / say) ** 2 + (rx / sax) ** 2 <= 1.0
    cls[skin] = 2

    # Lesion: ellipse-ish blob with harmonic boundary modulation.
    ang = rng.uniform(0.0, 2 * np.pi)
    dist = rng.uniform(0.0, 0.12) * r
    lcy, lcx = scy + dist * np.sin(ang), scx + dist * np.cos(ang)
    base_r = rng.uniform(0.11, 0.17) * r
    amp = 0.22 if malignant else 0.05
    harmonics = [(k, rng.uniform(0.3, 1.0), rng.uniform(0, 2 * np.pi)) for k in range(2, 7)]
    phi = np.arctan2(yy - lcy, xx - lcx)
    rho = np.hypot(yy - lcy, xx - lcx)
    wobble = sum(a * np.cos(k * phi + ps) for k, a, ps in harmonics)
    boundary = base_r * (1.0 + amp * wobble / max(1e-9, sum(a for _, a, _ in harmonics)))
    lesion = (rho <= boundary) & skin
    cls[lesion] = 1

    # Ruler: horizontal strip near the top or bottom edge.
    if with_ruler:
        top = rng.random() < 0.5
        y0 = int(rng.uniform(0.04, 0.07) * r) if top else int(rng.uniform(0.82, 0.86) * r)
        height = max(3, int(rng.uniform(0.08, 0.11) * r))
        x0 = int(rng.uniform(0.08, 0.15) * r)
        x1 = int(rng.uniform(0.82, 0.92) * r)
        ruler = np.zeros_like(cls, dtype=bool)
        ruler[y0 : y0 + height, x0:x1] = True
        cls[ruler] = 4

    # Marker: dot offset from the lesion.
    if with_marker:
        mr = rng.uniform(0.05, 0.075) * r
        mang = rng.uniform(0.0, 2 * np.pi)
        mdist = base_r * (1 + amp) + mr + 0.04 * r
        mcy = float(np.clip(lcy + mdist * np.sin(mang), 0.18 * r, 0.82 * r))
        mcx = float(np.clip(lcx + mdist * np.cos(mang), 0.12 * r, 0.88 * r))
        marker = np.hypot(yy - mcy, xx - mcx) <= mr
        cls[marker & (cls != 1)] = 3

    # Paint the image from the class map.
    img = np.empty((r, r, 3), dtype=np.float64)
    img[:] = _BACKGROUND_RGB
    jitter = rng.uniform(-12, 12, size=3)
    shade = 1.0 - 0.12 * (np.hypot(yy - scy, xx - scx) / r) ** 2
    skin_rgb = (np.asarray(_TONE_RGB[tone_bin]) + jitter)[None, None, :] * shade[..., None]
    img[cls == 2] = skin_rgb[cls == 2]

    lesion_rgb = np.asarray(_LESION_MALIGNANT_RGB if malignant else _LESION_BENIGN_RGB, dtype=np.float64)
    blotch = _blotch_field(rng, yy, xx, centers=6, radius=base_r / 2.5)
    blotch_amp = 48.0 if malignant else 12.0
    lesion_px = cls == 1
    img[lesion_px] = lesion_rgb[None, :] + blotch_amp * blotch[lesion_px, None]
    rim = lesion_px & (rho >= 0.75 * boundary)
    img[rim] *= 0.55 if malignant else 0.9

    if with_ruler:
        ruler_px = cls == 4
        img[ruler_px] = _RULER_RGB
        step = max(3, r // 16)
        tick = ruler_px & ((xx.astype(np.int64) % step) == 0)
        img[tick] = _TICK_RGB
    if with_marker:
        img[cls == 3] = _MARKER_RGB

    img += rng.normal(0.0, 4.5, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8), cls


def generate_synthetic_corpus(
    out_dir,
    n_per_cell: int,
    resolution: int = 64,
    seed: int = 0,
) -> Path:
    """Write a deterministic synthetic corpus under ``out_dir``.

    Produces ``n_per_cell`` samples for each of the 6 (tone, malignancy)
    cells with exact palette masks, and returns the metadata path.
    """
    if n_per_cell < 1:
        raise ParameterError(f"n_per_cell must be >= 1, got {n_per_cell}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for tone in TONE_BINS:
        for mal in (True, False):
            for i in range(n_per_cell):
                rid = f"syn_{TONE_SLUGS[tone]}_{'mal' if mal else 'ben'}_{i:04d}"
                img, cls = render_synthetic_sample(rng, resolution, tone, mal)
                image_rel = f"images/{rid}.png"
                mask_rel = f"masks/{rid}.png"
                Image.fromarray(img, mode="RGB").save(out_dir / image_rel)
                Image.fromarray(encode_mask(cls), mode="RGBA").save(out_dir / mask_rel)
                rows.append(
                    {
                        "id": rid,
                        "image_path": image_rel,
                        "mask_path": mask_rel,
                        "tone_bin": tone,
                        "malignant": "1" if mal else "0",
                        "disease": "synthetic-malignant" if mal else "synthetic-benign",
                    }
                )
    metadata = out_dir / "metadata.csv"
    with open(metadata, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METADATA_HEADER)
        writer.writeheader()
        writer.writerows(rows)
    return metadata


def records_by_id(records) -> dict[str, SampleRecord]:
    return {rec.id: rec for rec in records}


def resolve_ids(ids, index: dict[str, SampleRecord]) -> list[SampleRecord]:
    missing = [i for i in ids if i not in index]
    if missing:
        raise DataError(f"plan references unknown sample ids: {missing[:5]}")
    return [index[i] for i in ids]
