"""Dataset construction: annotation merging, cropping, labeling, augmentation,
splitting, synthetic generation, and the manifest/shard file formats.

The unit of provenance is the lineage root (source_id): augmented copies
keep their source's root, and splits allocate whole roots so no descendant
ever lands in a different part than its origin.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, rotate

from .errors import ConfigurationError, DataError, ManifestError
from .tensor import RUN_DTYPE, Tensor

LABELS = ("benign", "malignant", "excluded")
LABEL_TO_BYTE = {"benign": 0, "malignant": 1}
BYTE_TO_LABEL = {value: key for key, value in LABEL_TO_BYTE.items()}

MANIFEST_HEADER = ["image_path", "nodule_id", "slice_idx", "rad_id",
                   "center_x", "center_y", "malignancy"]


@dataclass(frozen=True)
class RadiologistEntry:
    rad_id: str
    center: tuple[float, float]
    score: int
    contour: tuple[tuple[float, float], ...] | None = None


@dataclass
class AnnotationRecord:
    image_path: str
    nodule_id: str
    slice_idx: int
    entries: tuple[RadiologistEntry, ...]


@dataclass(frozen=True)
class DatasetVariant:
    """Treatment of ambiguity score 3: I ignores, B benign, M malignant."""

    selector: str

    def __post_init__(self):
        if self.selector not in ("I", "B", "M"):
            raise ConfigurationError(
                f"variant selector must be one of I, B, M, got {self.selector!r}")


def as_variant(value) -> DatasetVariant:
    if isinstance(value, DatasetVariant):
        return value
    return DatasetVariant(str(value))


@dataclass
class NoduleSample:
    image: Tensor
    malignancy_score: int
    label: str
    sample_id: str
    source_id: str
    lineage: tuple[str, ...] = ()
    mask: np.ndarray | None = None


@dataclass
class SplitPlan:
    seed: int
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    folds: int | None = None


def round_half_away(value: float) -> int:
    """Round to nearest integer with .5 going away from zero."""
    return int(np.sign(value) * np.floor(abs(value) + 0.5))


def _check_record(record: AnnotationRecord) -> None:
    if len(record.entries) == 0:
        raise DataError(f"record {record.nodule_id!r} has no radiologist entries")
    if len(record.entries) > 4:
        raise DataError(f"record {record.nodule_id!r} has "
                        f"{len(record.entries)} entries, at most 4 allowed")
    for entry in record.entries:
        if not isinstance(entry.score, (int, np.integer)) or not 1 <= entry.score <= 5:
            raise DataError(f"record {record.nodule_id!r}: score "
                            f"{entry.score!r} not an integer in [1,5]")


def merge_annotations(record: AnnotationRecord) -> tuple[tuple[int, int], int]:
    """Mean center (rounded to pixel) and mean score (half away from zero)."""
    _check_record(record)
    xs = [entry.center[0] for entry in record.entries]
    ys = [entry.center[1] for entry in record.entries]
    scores = [entry.score for entry in record.entries]
    center = (round_half_away(sum(xs) / len(xs)),
              round_half_away(sum(ys) / len(ys)))
    return center, round_half_away(sum(scores) / len(scores))


def crop_nodule(slice_image: Tensor, center: tuple[int, int],
                size: int = 96) -> Tensor:
    """Size x size window centered at (x, y); overhang is zero-padded."""
    slice_image = np.asarray(slice_image)
    if slice_image.ndim != 2:
        raise DataError(f"slice must be 2-d, got shape {slice_image.shape}")
    h, w = slice_image.shape
    cx, cy = int(center[0]), int(center[1])
    if not (0 <= cx < w and 0 <= cy < h):
        raise DataError(f"center ({cx},{cy}) lies outside the "
                        f"{h}x{w} slice")
    half = size // 2
    row0 = cy - half
    col0 = cx - half
    out = np.zeros((size, size), dtype=slice_image.dtype)
    src_r0 = max(row0, 0)
    src_c0 = max(col0, 0)
    src_r1 = min(row0 + size, h)
    src_c1 = min(col0 + size, w)
    out[src_r0 - row0:src_r1 - row0, src_c0 - col0:src_c1 - col0] = \
        slice_image[src_r0:src_r1, src_c0:src_c1]
    return out


def assign_label(score: int, variant) -> str:
    variant = as_variant(variant)
    if not isinstance(score, (int, np.integer)) or not 1 <= score <= 5:
        raise DataError(f"malignancy score must be an integer in [1,5], "
                        f"got {score!r}")
    if score <= 2:
        return "benign"
    if score >= 4:
        return "malignant"
    return {"I": "excluded", "B": "benign", "M": "malignant"}[variant.selector]


def label_samples(samples: list[NoduleSample], variant) -> list[NoduleSample]:
    """Relabel every sample from its score under the given variant."""
    variant = as_variant(variant)
    return [replace(s, label=assign_label(s.malignancy_score, variant))
            for s in samples]


def filter_excluded(samples: list[NoduleSample]) -> list[NoduleSample]:
    return [s for s in samples if s.label != "excluded"]


def count_labels(samples: list[NoduleSample]) -> dict[str, int]:
    counts = {label: 0 for label in LABELS}
    for sample in samples:
        counts[sample.label] += 1
    return counts


def minmax_normalize(image: Tensor) -> Tensor:
    """Rescale to [0,1]; a constant image maps to all zeros."""
    image = np.asarray(image, dtype=np.float64)
    lo = image.min()
    hi = image.max()
    if hi == lo:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


# Fixed per-variant training-set targets at the three published scales,
# each as (malignant, benign).  "before" holds the unaugmented counts.
AUGMENT_PLAN = {
    "I": {"before": (3836, 3184), "15k": (9836, 9184),
          "30k": (15836, 15184), "60k": (30836, 30184)},
    "B": {"before": (3836, 7712), "15k": (7672, 7712),
          "30k": (19180, 21712), "60k": (38360, 35712)},
    "M": {"before": (8361, 3187), "15k": (8361, 6374),
          "30k": (16361, 15935), "60k": (33444, 28683)},
}


def augment_plan(variant, scale: str) -> dict[str, int]:
    """Per-class sample targets for a named training-set scale."""
    variant = as_variant(variant)
    scales = AUGMENT_PLAN[variant.selector]
    if scale not in scales:
        raise ConfigurationError(
            f"scale must be one of {sorted(scales)}, got {scale!r}")
    malignant, benign = scales[scale]
    return {"malignant": malignant, "benign": benign}


@dataclass
class AugmentPolicy:
    shift_frac: float = 0.10
    rotate_deg: float = 15.0
    flips: bool = True


def _shift_int(grid: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(grid)
    h, w = grid.shape
    src_r = slice(max(-dy, 0), min(h - dy, h))
    src_c = slice(max(-dx, 0), min(w - dx, w))
    dst_r = slice(max(dy, 0), min(h + dy, h))
    dst_c = slice(max(dx, 0), min(w + dx, w))
    out[dst_r, dst_c] = grid[src_r, src_c]
    return out


def _transform(image: np.ndarray, mask, rng: np.random.Generator,
               policy: AugmentPolicy) -> tuple[np.ndarray, object, str]:
    size = image.shape[0]
    max_shift = int(round(policy.shift_frac * size))
    dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    angle = float(rng.uniform(-policy.rotate_deg, policy.rotate_deg))
    hflip = policy.flips and rng.random() < 0.5
    vflip = policy.flips and rng.random() < 0.5
    out = _shift_int(image, dy, dx)
    out = rotate(out, angle, reshape=False, order=1, cval=0.0)
    new_mask = None
    if mask is not None:
        new_mask = _shift_int(np.asarray(mask), dy, dx)
        new_mask = rotate(new_mask, angle, reshape=False, order=0, cval=0)
    if hflip:
        out = out[:, ::-1].copy()
        new_mask = None if new_mask is None else new_mask[:, ::-1].copy()
    if vflip:
        out = out[::-1].copy()
        new_mask = None if new_mask is None else new_mask[::-1].copy()
    desc = f"shift({dy:+d},{dx:+d})|rot({angle:+.2f})"
    if hflip:
        desc += "|hflip"
    if vflip:
        desc += "|vflip"
    return out, new_mask, desc


def augment(samples: list[NoduleSample], targets: dict[str, int],
            rng: np.random.Generator,
            policy: AugmentPolicy | None = None) -> list[NoduleSample]:
    """Grow each class to its target by transforming random originals.

    Originals are always retained untouched; every new sample records the
    transform in its lineage and keeps its source's root id.
    """
    policy = policy or AugmentPolicy()
    counts: dict[str, int] = {}
    pools: dict[str, list[NoduleSample]] = {}
    for sample in samples:
        counts[sample.label] = counts.get(sample.label, 0) + 1
        pools.setdefault(sample.label, []).append(sample)
    for label, target in targets.items():
        current = counts.get(label, 0)
        if target < current:
            raise ConfigurationError(
                f"target {target} for class {label!r} is below the current "
                f"count {current}")
        if target > current and current == 0:
            raise ConfigurationError(
                f"cannot augment class {label!r}: no originals present")
    out = list(samples)
    for label in sorted(targets):
        pool = pools.get(label, [])
        needed = targets[label] - counts.get(label, 0)
        for k in range(needed):
            source = pool[int(rng.integers(len(pool)))]
            image, mask, desc = _transform(source.image, source.mask, rng, policy)
            out.append(replace(
                source, image=image, mask=mask,
                sample_id=f"{source.sample_id}.aug{k}",
                lineage=source.lineage + (desc,)))
    return out


def _group_roots(samples: list[NoduleSample]) -> dict[str, list[NoduleSample]]:
    roots: dict[str, list[NoduleSample]] = {}
    for sample in samples:
        if sample.label == "excluded":
            raise DataError("excluded samples must be filtered out before "
                            "splitting")
        roots.setdefault(sample.source_id, []).append(sample)
    for root_id, members in roots.items():
        labels = {m.label for m in members}
        if len(labels) > 1:
            raise DataError(f"root {root_id!r} mixes labels {sorted(labels)}")
    return roots


def split(samples: list[NoduleSample], plan: SplitPlan):
    """Stratified split on lineage roots; returns train/val/test or k folds."""
    if plan.folds is None:
        if len(plan.ratios) != 3 or any(r < 0 for r in plan.ratios) \
                or abs(sum(plan.ratios) - 1.0) > 1e-9:
            raise ConfigurationError(
                f"ratios must be three non-negative values summing to 1, "
                f"got {plan.ratios}")
    elif plan.folds < 2:
        raise ConfigurationError(f"folds must be >= 2, got {plan.folds}")
    roots = _group_roots(samples)
    by_class: dict[str, list[str]] = {}
    for root_id in sorted(roots):
        by_class.setdefault(roots[root_id][0].label, []).append(root_id)
    rng = np.random.default_rng(plan.seed)
    if plan.folds is not None:
        folds: list[list[NoduleSample]] = [[] for _ in range(plan.folds)]
        for label in sorted(by_class):
            ids = by_class[label]
            if len(ids) < plan.folds:
                raise DataError(f"class {label!r} has only {len(ids)} roots, "
                                f"cannot fill {plan.folds} folds")
            order = rng.permutation(len(ids))
            for position, idx in enumerate(order):
                folds[position % plan.folds].extend(roots[ids[idx]])
        return folds
    parts: dict[str, list[NoduleSample]] = {"train": [], "val": [], "test": []}
    names = ("train", "val", "test")
    for label in sorted(by_class):
        ids = by_class[label]
        n = len(ids)
        order = rng.permutation(n)
        b1 = round(plan.ratios[0] * n)
        b2 = round((plan.ratios[0] + plan.ratios[1]) * n)
        bounds = {"train": (0, b1), "val": (b1, b2), "test": (b2, n)}
        for name in names:
            lo, hi = bounds[name]
            if plan.ratios[names.index(name)] > 0 and hi == lo:
                raise DataError(f"class {label!r} has too few roots ({n}) to "
                                f"fill the {name!r} part")
            for idx in order[lo:hi]:
                parts[name].extend(roots[ids[idx]])
    return parts


def _synth_one(stream: np.random.Generator, size: int, malignant: bool,
               index: int) -> NoduleSample:
    scale = size / 96.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    jitter = 0.05 * size
    cy = size / 2.0 + stream.uniform(-jitter, jitter)
    cx = size / 2.0 + stream.uniform(-jitter, jitter)
    dy = yy - cy
    dx = xx - cx
    dist = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    if malignant:
        radius = stream.uniform(8.0, 20.0) * scale
        boundary = np.full_like(theta, radius)
        # lobulated margin: a few low-order harmonics on the boundary
        for k in range(2, 6):
            amp = stream.uniform(0.05, 0.12) * radius
            phase = stream.uniform(0.0, 2.0 * np.pi)
            boundary = boundary + amp * np.cos(k * theta + phase)
        brightness = stream.uniform(0.75, 0.95)
        score = int(stream.integers(4, 6))
    else:
        radius = stream.uniform(5.0, 10.0) * scale
        boundary = np.full_like(theta, radius)
        brightness = stream.uniform(0.3, 0.45)
        score = int(stream.integers(1, 3))
    interior = dist <= boundary
    blob = gaussian_filter(interior.astype(np.float64), sigma=1.0) * brightness
    noise = gaussian_filter(stream.standard_normal((size, size)), sigma=3.0)
    noise = noise / max(noise.std(), 1e-12) * 0.06
    image = 0.15 + noise + blob
    sample_id = f"synth{index:05d}"
    return NoduleSample(image=image, malignancy_score=score,
                        label="malignant" if malignant else "benign",
                        sample_id=sample_id, source_id=sample_id,
                        mask=interior.astype(np.uint8))


def synth_generate(n: int, rng: np.random.Generator,
                   size: int = 96) -> list[NoduleSample]:
    """Balanced two-class synthetic nodules with ground-truth masks."""
    if n < 2:
        raise DataError(f"need at least 2 samples for both classes, got {n}")
    streams = rng.spawn(n)
    return [_synth_one(streams[i], size, malignant=(i % 2 == 1), index=i)
            for i in range(n)]


def load_slice(path) -> np.ndarray:
    """Slice images are stored as 2-d .npy arrays."""
    array = np.load(path)
    if array.ndim != 2:
        raise DataError(f"slice image {path} must be 2-d, got shape {array.shape}")
    return array


def load_manifest(path) -> list[AnnotationRecord]:
    """Parse the annotation CSV; all row problems are reported together."""
    path = Path(path)
    problems: list[str] = []
    groups: dict[tuple[str, str, int], list[RadiologistEntry]] = {}
    order: list[tuple[str, str, int]] = []
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(["line 1: empty file, expected header "
                                 + ",".join(MANIFEST_HEADER)]) from None
        if header != MANIFEST_HEADER:
            raise ManifestError([f"line 1: bad header {header!r}, expected "
                                 f"{MANIFEST_HEADER!r}"])
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                problems.append(f"line {line_no}: expected "
                                f"{len(MANIFEST_HEADER)} fields, got {len(row)}")
                continue
            image_path, nodule_id, slice_idx, rad_id, cx, cy, malignancy = row
            if not nodule_id:
                problems.append(f"line {line_no}: empty nodule_id")
                continue
            try:
                slice_idx = int(slice_idx)
                center = (float(cx), float(cy))
            except ValueError as exc:
                problems.append(f"line {line_no}: {exc}")
                continue
            try:
                score = int(malignancy)
            except ValueError:
                problems.append(f"line {line_no}: malignancy {malignancy!r} "
                                f"is not an integer")
                continue
            if not 1 <= score <= 5:
                problems.append(f"line {line_no}: malignancy {score} out of "
                                f"range [1,5]")
                continue
            key = (image_path, nodule_id, slice_idx)
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(RadiologistEntry(rad_id=rad_id, center=center,
                                                score=score))
            if len(groups[key]) == 5:
                problems.append(f"line {line_no}: fifth entry for nodule "
                                f"{nodule_id!r} slice {slice_idx}, at most 4 "
                                f"radiologists allowed")
    if problems:
        raise ManifestError(problems)
    missing = sorted({image_path for image_path, _, _ in groups
                      if not (path.parent / image_path).exists()})
    if missing:
        raise FileNotFoundError(
            "manifest references missing image files: " + ", ".join(missing))
    return [AnnotationRecord(image_path=key[0], nodule_id=key[1],
                             slice_idx=key[2], entries=tuple(groups[key]))
            for key in order]


def write_manifest(records: list[AnnotationRecord], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for record in records:
            for entry in record.entries:
                writer.writerow([record.image_path, record.nodule_id,
                                 record.slice_idx, entry.rad_id,
                                 entry.center[0], entry.center[1], entry.score])


def write_shard(samples: list[NoduleSample], path) -> None:
    """Binary shard: per sample a float32 LE grid, a label byte, and an
    int32 LE score; offsets and lineage go to a sidecar text index, masks
    (when present) to a parallel byte file."""
    if not samples:
        raise DataError("refusing to write an empty shard")
    size = samples[0].image.shape
    if len(size) != 2 or size[0] != size[1]:
        raise DataError(f"shard images must be square 2-d grids, got {size}")
    path = Path(path)
    any_mask = any(s.mask is not None for s in samples)
    index_lines = ["offset,sample_id,root_id,label,score,lineage"]
    offset = 0
    with path.open("wb") as handle, \
            (Path(str(path) + ".masks").open("wb") if any_mask else _NullSink()) \
            as mask_handle:
        for sample in samples:
            if sample.label not in LABEL_TO_BYTE:
                raise DataError(f"sample {sample.sample_id!r} has label "
                                f"{sample.label!r}; shards hold only "
                                f"benign/malignant")
            if sample.image.shape != size:
                raise DataError(f"sample {sample.sample_id!r} shape "
                                f"{sample.image.shape} differs from {size}")
            blob = np.ascontiguousarray(sample.image, dtype="<f4").tobytes()
            handle.write(blob)
            handle.write(bytes([LABEL_TO_BYTE[sample.label]]))
            handle.write(np.int32(sample.malignancy_score).astype("<i4").tobytes())
            # each lineage entry uses "|" internally, so join entries with ";"
            lineage = ";".join(sample.lineage) if sample.lineage else "-"
            index_lines.append(f"{offset},{sample.sample_id},"
                               f"{sample.source_id},{sample.label},"
                               f"{sample.malignancy_score},{lineage}")
            offset += len(blob) + 5
            if any_mask:
                mask = sample.mask
                if mask is None:
                    mask = np.zeros(size, dtype=np.uint8)
                mask_handle.write(np.ascontiguousarray(mask, dtype=np.uint8)
                                  .tobytes())
    Path(str(path) + ".index").write_text("\n".join(index_lines) + "\n",
                                          encoding="utf-8")


class _NullSink:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def write(self, _):
        pass


def read_shard(path) -> list[NoduleSample]:
    path = Path(path)
    index_path = Path(str(path) + ".index")
    if not index_path.exists():
        raise DataError(f"shard index {index_path} not found")
    lines = index_path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "offset,sample_id,root_id,label,score,lineage":
        raise DataError(f"bad shard index header in {index_path}")
    # lineage is the last column and may itself contain commas
    rows = [line.split(",", 5) for line in lines[1:] if line]
    if not rows:
        raise DataError(f"shard index {index_path} lists no samples")
    data = path.read_bytes()
    if len(data) % len(rows) != 0:
        raise DataError(f"shard size {len(data)} is not a multiple of the "
                        f"{len(rows)} indexed samples")
    record = len(data) // len(rows)
    side = int(np.sqrt((record - 5) / 4))
    if side * side * 4 + 5 != record:
        raise DataError(f"shard record size {record} does not describe a "
                        f"square grid")
    mask_path = Path(str(path) + ".masks")
    masks = None
    if mask_path.exists():
        mask_data = mask_path.read_bytes()
        if len(mask_data) != len(rows) * side * side:
            raise DataError(f"mask file {mask_path} holds {len(mask_data)} "
                            f"bytes, expected {len(rows) * side * side}")
        masks = np.frombuffer(mask_data, dtype=np.uint8)
        masks = masks.reshape(len(rows), side, side)
    samples = []
    for i, row in enumerate(rows):
        if len(row) != 6:
            raise DataError(f"bad shard index row: {','.join(row)!r}")
        offset, sample_id, root_id, label, score, lineage = row
        offset = int(offset)
        if offset != i * record:
            raise DataError(f"index offset {offset} for {sample_id!r} does "
                            f"not match record layout")
        grid = np.frombuffer(data, dtype="<f4", count=side * side,
                             offset=offset).reshape(side, side)
        label_byte = data[offset + side * side * 4]
        stored_score = int(np.frombuffer(data, dtype="<i4", count=1,
                                         offset=offset + side * side * 4 + 1)[0])
        if BYTE_TO_LABEL.get(label_byte) != label or stored_score != int(score):
            raise DataError(f"shard record for {sample_id!r} disagrees with "
                            f"its index row")
        samples.append(NoduleSample(
            image=grid.copy(), malignancy_score=stored_score, label=label,
            sample_id=sample_id, source_id=root_id,
            lineage=() if lineage == "-" else tuple(lineage.split(";")),
            mask=None if masks is None else masks[i].copy()))
    return samples


def batch_from_samples(samples: list[NoduleSample]) -> tuple[Tensor, np.ndarray]:
    """Stack samples into an NCHW batch and an integer label vector."""
    if not samples:
        raise DataError("cannot batch zero samples")
    images = np.stack([s.image for s in samples])[:, None, :, :]
    labels = np.array([LABEL_TO_BYTE[s.label] for s in samples], dtype=np.int64)
    return images.astype(RUN_DTYPE), labels
