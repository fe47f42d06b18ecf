"""Critical response maps: class-selective back-projection to input space.

The map for class c starts from the final feature maps (pre-GAP), applies
the adjoint of the class head with every kernel except the c-th row zeroed,
then walks the remaining layers in reverse: conv via its transposed
projection, pooling via switch-driven unpooling, batchnorm as its
inference-time per-channel scale, dropout as identity.  Bias terms never
enter the backward chain.  ReLU handling is selectable: the default applies
nothing, "deconvnet-relu" rectifies the back-projected signal, and "guided"
additionally applies the forward mask.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (ConfigurationError, DataError, InternalConsistencyError)
from .sequencer import ForwardTrace, SequencerModel, forward
from .tensor import ConvParams, Tensor, deconv_project, ensure_finite, unpool

VARIANTS = ("literal-eq2", "deconvnet-relu", "guided")

RAW_MAGIC = b"CRM1"


@dataclass(frozen=True)
class MapSource:
    """Where a map came from: parameter digest plus input image digest."""

    model_digest: str
    image_digest: str


@dataclass
class CriticalResponseMap:
    class_id: int
    map: Tensor
    source: MapSource
    variant: str


def _array_digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16]


def model_digest(model: SequencerModel) -> str:
    """Digest of the float32 parameter blobs, matching checkpoint identity."""
    h = hashlib.sha256()
    for _, arr in model.checkpoint_arrays():
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def _as_single_image(image: Tensor, model: SequencerModel) -> Tensor:
    image = np.asarray(image)
    channels = model.config.input_channels
    if image.ndim == 2:
        image = image[None, None]
    elif image.ndim == 3 and image.shape[0] == channels:
        image = image[None]
    elif image.ndim == 4 and image.shape[0] == 1:
        pass
    else:
        raise DataError(f"expected one image, got shape {image.shape}")
    return image


def _masked_head(head: ConvParams, class_id: int) -> ConvParams:
    weights = np.zeros_like(head.weights)
    weights[class_id] = head.weights[class_id]
    return ConvParams(weights=weights, bias=np.zeros_like(head.bias),
                      stride=head.stride, padding=head.padding)


def backproject(model: SequencerModel, trace: ForwardTrace, featmaps: Tensor,
                class_id: int, variant: str = "literal-eq2") -> Tensor:
    """Drive the backward pipeline from explicit feature maps.

    Exposed separately from generate_crm so linearity in the feature maps
    can be exercised against a fixed trace.
    """
    if variant not in VARIANTS:
        raise ConfigurationError(
            f"variant must be one of {VARIANTS}, got {variant!r}")
    if not 0 <= class_id < model.config.class_count:
        raise DataError(
            f"class_id {class_id} out of range for "
            f"{model.config.class_count} classes")
    if trace.model_version != model.version:
        raise InternalConsistencyError(
            f"trace was taken at model version {trace.model_version}, "
            f"model is now at {model.version}")
    if len(trace.records) != len(model.layers):
        raise InternalConsistencyError(
            "trace layer records do not match the model's layer list")
    featmaps = np.asarray(featmaps, dtype=model.dtype)
    if featmaps.shape != trace.class_maps.shape:
        raise InternalConsistencyError(
            f"feature maps shape {featmaps.shape} does not match trace "
            f"{trace.class_maps.shape}")
    signal = deconv_project(featmaps, _masked_head(model.class_conv.params, class_id))
    for layer, rec in zip(reversed(model.layers[:-1]),
                          reversed(trace.records[:-1])):
        if layer.kind == "conv":
            bias_free = ConvParams(weights=layer.params.weights,
                                   bias=np.zeros_like(layer.params.bias),
                                   stride=layer.params.stride,
                                   padding=layer.params.padding)
            signal = deconv_project(signal, bias_free)
        elif layer.kind == "bn":
            p = layer.params
            scale = p.gamma / np.sqrt(p.running_var + p.epsilon)
            signal = signal * scale[None, :, None, None]
        elif layer.kind == "dropout":
            pass
        elif layer.kind == "relu":
            if variant == "deconvnet-relu":
                signal = np.maximum(signal, 0.0)
            elif variant == "guided":
                signal = np.maximum(signal, 0.0) * rec.relu_mask
        elif layer.kind == "pool":
            signal = unpool(signal, rec.switches, rec.input.shape)
        else:
            raise InternalConsistencyError(f"unknown layer kind {layer.kind!r}")
    return signal


def generate_crm(model: SequencerModel, image: Tensor, class_id: int,
                 variant: str = "literal-eq2") -> CriticalResponseMap:
    """Back-project class evidence for one image down to input coordinates."""
    image = _as_single_image(image, model)
    _, trace = forward(model, image, "infer")
    signal = backproject(model, trace, trace.class_maps, class_id, variant)
    source = MapSource(model_digest=model_digest(model),
                       image_digest=_array_digest(trace.records[0].input))
    return CriticalResponseMap(class_id=class_id, map=signal,
                               source=source, variant=variant)


def crm_all_classes(model: SequencerModel, image: Tensor,
                    variant: str = "literal-eq2") -> list[CriticalResponseMap]:
    """One map per class, all driven from a single shared forward trace."""
    image = _as_single_image(image, model)
    _, trace = forward(model, image, "infer")
    source = MapSource(model_digest=model_digest(model),
                       image_digest=_array_digest(trace.records[0].input))
    maps = []
    for class_id in range(model.config.class_count):
        signal = backproject(model, trace, trace.class_maps, class_id, variant)
        maps.append(CriticalResponseMap(class_id=class_id, map=signal,
                                        source=source, variant=variant))
    return maps


@dataclass
class RenderedMap:
    pixels: np.ndarray
    mode: str
    scale: float


def _map_grid(crm) -> np.ndarray:
    values = crm.map if isinstance(crm, CriticalResponseMap) else np.asarray(crm)
    values = np.asarray(values)
    if values.ndim == 4:
        if values.shape[0] != 1 or values.shape[1] != 1:
            raise DataError(f"expected a single-channel map, got {values.shape}")
        values = values[0, 0]
    if values.ndim != 2:
        raise DataError(f"expected a 2-d map grid, got shape {values.shape}")
    return values


def render_map(crm, mode: str = "signed") -> RenderedMap:
    """Quantize to 8-bit grayscale.

    signed: [-max|a|, +max|a|] -> [0, 255] with 128 at zero; magnitude:
    [0, max|a|] -> [0, 255].  An all-zero map renders mid-gray / black with
    scale 0 recorded.  Half-counts round away from zero.
    """
    if mode not in ("signed", "magnitude"):
        raise ConfigurationError(f"mode must be 'signed' or 'magnitude', got {mode!r}")
    values = _map_grid(crm)
    ensure_finite(values, "response map")
    peak = float(np.max(np.abs(values))) if values.size else 0.0
    if peak == 0.0:
        fill = 128 if mode == "signed" else 0
        return RenderedMap(pixels=np.full(values.shape, fill, dtype=np.uint8),
                           mode=mode, scale=0.0)
    if mode == "signed":
        levels = 255.0 * (values + peak) / (2.0 * peak)
    else:
        levels = 255.0 * np.abs(values) / peak
    pixels = np.floor(levels + 0.5).astype(np.uint8)
    return RenderedMap(pixels=pixels, mode=mode, scale=peak)


def descale_map(rendered: RenderedMap) -> np.ndarray:
    """Approximate inverse of render_map (lossy by quantization)."""
    levels = rendered.pixels.astype(np.float64)
    if rendered.mode == "signed":
        return (levels / 255.0) * 2.0 * rendered.scale - rendered.scale
    return (levels / 255.0) * rendered.scale


def localization_score(crm, region_mask: np.ndarray) -> float:
    """Fraction of total |map| mass inside the mask; 0.0 for a zero map."""
    values = _map_grid(crm)
    mask = np.asarray(region_mask)
    if mask.shape != values.shape:
        raise DataError(f"mask shape {mask.shape} does not match map "
                        f"shape {values.shape}")
    inside = mask != 0
    if not inside.any():
        raise DataError("region mask selects no pixels")
    mass = np.abs(values)
    total = float(mass.sum())
    if total == 0.0:
        return 0.0
    return float(mass[inside].sum() / total)


def write_map_pgm(crm: CriticalResponseMap, path, mode: str = "signed") -> None:
    """Binary PGM (P5, maxval 255) plus a sidecar text file of metadata."""
    rendered = render_map(crm, mode)
    h, w = rendered.pixels.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    path = Path(path)
    path.write_bytes(header + rendered.pixels.tobytes())
    sidecar = path.with_suffix(".txt")
    lines = [
        f"class_id = {crm.class_id}",
        f"variant = {crm.variant}",
        f"mode = {rendered.mode}",
        f"scale = {rendered.scale!r}",
        f"image_digest = {crm.source.image_digest}",
        f"model_digest = {crm.source.model_digest}",
    ]
    sidecar.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_map_raw(crm, path) -> None:
    """Raw float32 grid with a 16-byte header: magic, height, width, reserved."""
    values = _map_grid(crm)
    h, w = values.shape
    header = RAW_MAGIC + struct.pack("<III", h, w, 0)
    Path(path).write_bytes(header
                           + np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_map_raw(path) -> np.ndarray:
    """Inverse of write_map_raw; returns the float32 grid."""
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise DataError(f"raw map file holds only {len(data)} bytes")
    if data[:4] != RAW_MAGIC:
        raise DataError(f"bad raw map magic {data[:4]!r}")
    h, w, _ = struct.unpack("<III", data[4:16])
    expected = 16 + h * w * 4
    if len(data) != expected:
        raise DataError(f"raw map file holds {len(data)} bytes, header "
                        f"implies {expected}")
    grid = np.frombuffer(data, dtype="<f4", count=h * w, offset=16)
    return grid.reshape(h, w).copy()
