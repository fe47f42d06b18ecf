"""Stacked-cell CNN classifier.

A model is a flat list of layer objects built from a declarative config:
each standard cell is [conv -> batchnorm -> dropout -> relu] * conv_count
followed by a 2x2 max pool, and the final cell is one conv block followed
by a 1x1 conv with one output channel per class, global average pooling,
and softmax.  Forward passes record a full trace so the backward pass and
the response-map engine never recompute state.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CheckpointChecksumError, CheckpointStructureError,
                     CheckpointVersionError, ConfigurationError, DataError,
                     InternalConsistencyError, NumericError)
from .tensor import (RUN_DTYPE, BatchNormParams, ConvParams, PoolSwitches,
                     Tensor, batch_moments, batchnorm_bwd, batchnorm_fwd,
                     conv2d_bwd, conv2d_fwd, dropout, gap, maxpool_fwd, relu,
                     softmax_probs, softmax_xent, unpool)

Gradients = dict[str, Tensor]


@dataclass
class CellConfig:
    """One sequencing cell: conv_count conv blocks sharing dropout/momentum."""

    channels: int
    conv_count: int = 3
    kernel: int = 3
    dropout_rate: float = 0.25
    bn_momentum: float = 0.99


@dataclass
class FinalCellConfig:
    """Head cell: one conv block, then a 1x1 conv onto the class channels."""

    channels: int = 128
    kernel: int = 3
    dropout_rate: float = 0.25
    bn_momentum: float = 0.99


def _default_cells() -> tuple[CellConfig, ...]:
    return (CellConfig(16), CellConfig(32), CellConfig(64))


@dataclass
class SequencerConfig:
    cells: tuple[CellConfig, ...] = field(default_factory=_default_cells)
    final_cell: FinalCellConfig = field(default_factory=FinalCellConfig)
    input_size: int = 96
    input_channels: int = 1
    class_count: int = 2
    bn_epsilon: float = 1e-5


def validate_config(config: SequencerConfig) -> list[str]:
    """Collect every violation instead of stopping at the first."""
    problems: list[str] = []
    if len(config.cells) == 0:
        problems.append("cells must be non-empty")
    for i, cell in enumerate(config.cells):
        tag = f"cells[{i}]"
        if cell.channels < 1:
            problems.append(f"{tag}.channels must be >= 1, got {cell.channels}")
        if cell.conv_count < 1:
            problems.append(f"{tag}.conv_count must be >= 1, got {cell.conv_count}")
        if cell.kernel < 1 or cell.kernel % 2 == 0:
            problems.append(f"{tag}.kernel must be odd and >= 1, got {cell.kernel}")
        if not 0.0 <= cell.dropout_rate < 1.0:
            problems.append(f"{tag}.dropout_rate must be in [0,1), got {cell.dropout_rate}")
        if not 0.0 <= cell.bn_momentum < 1.0:
            problems.append(f"{tag}.bn_momentum must be in [0,1), got {cell.bn_momentum}")
    fc = config.final_cell
    if fc.channels < 1:
        problems.append(f"final_cell.channels must be >= 1, got {fc.channels}")
    if fc.kernel < 1 or fc.kernel % 2 == 0:
        problems.append(f"final_cell.kernel must be odd and >= 1, got {fc.kernel}")
    if not 0.0 <= fc.dropout_rate < 1.0:
        problems.append(f"final_cell.dropout_rate must be in [0,1), got {fc.dropout_rate}")
    if not 0.0 <= fc.bn_momentum < 1.0:
        problems.append(f"final_cell.bn_momentum must be in [0,1), got {fc.bn_momentum}")
    if config.input_channels < 1:
        problems.append(f"input_channels must be >= 1, got {config.input_channels}")
    if config.class_count < 2:
        problems.append(f"class_count must be >= 2, got {config.class_count}")
    if config.bn_epsilon <= 0.0:
        problems.append(f"bn_epsilon must be > 0, got {config.bn_epsilon}")
    pool_stages = len(config.cells)
    divisor = 2 ** pool_stages
    if config.input_size < divisor or config.input_size % divisor != 0:
        problems.append(f"input_size {config.input_size} is not divisible by "
                        f"2^{pool_stages} (one pooling per cell)")
    return problems


def parameter_count(config: SequencerConfig) -> int:
    """Trainable parameter count, closed form.

    Each conv block with c_in inputs and c outputs at kernel k contributes
    c*c_in*k^2 + c (conv) + 2c (batchnorm gamma/beta); the class head adds
    N*F + N for F final-cell channels and N classes.
    """
    total = 0
    c_in = config.input_channels
    for cell in config.cells:
        for _ in range(cell.conv_count):
            total += cell.channels * c_in * cell.kernel ** 2 + cell.channels
            total += 2 * cell.channels
            c_in = cell.channels
    fc = config.final_cell
    total += fc.channels * c_in * fc.kernel ** 2 + fc.channels
    total += 2 * fc.channels
    total += config.class_count * fc.channels + config.class_count
    return total


@dataclass
class LayerTrace:
    """Everything one layer recorded during forward: pre/post activations
    plus the layer-specific extras the backward pass and the response-map
    walk consume."""

    name: str
    kind: str
    input: Tensor
    output: Tensor
    switches: PoolSwitches | None = None
    relu_mask: Tensor | None = None
    dropout_mask: Tensor | None = None
    batch_mean: np.ndarray | None = None
    batch_var: np.ndarray | None = None


@dataclass
class ForwardTrace:
    mode: str
    model_version: int
    records: list[LayerTrace]
    class_maps: Tensor
    logits: Tensor
    probs: Tensor


class ConvLayer:
    kind = "conv"

    def __init__(self, name: str, params: ConvParams):
        self.name = name
        self.params = params

    def forward(self, x: Tensor, mode: str, rng) -> tuple[Tensor, LayerTrace]:
        out = conv2d_fwd(x, self.params)
        return out, LayerTrace(self.name, self.kind, x, out)

    def backward(self, rec: LayerTrace, grad_out: Tensor) -> tuple[Tensor, Gradients]:
        gx, gw, gb = conv2d_bwd(rec.input, self.params, grad_out)
        return gx, {f"{self.name}.weights": gw, f"{self.name}.bias": gb}

    def trainable_items(self):
        return [(f"{self.name}.weights", self.params.weights),
                (f"{self.name}.bias", self.params.bias)]

    def checkpoint_items(self):
        return self.trainable_items()


class BatchNormLayer:
    kind = "bn"

    def __init__(self, name: str, params: BatchNormParams):
        self.name = name
        self.params = params

    def forward(self, x, mode, rng):
        if mode == "train":
            mean, var = batch_moments(x)
        else:
            mean, var = self.params.running_mean.copy(), self.params.running_var.copy()
        out = batchnorm_fwd(x, self.params, mode)
        return out, LayerTrace(self.name, self.kind, x, out,
                               batch_mean=mean, batch_var=var)

    def backward(self, rec, grad_out):
        gx, ggamma, gbeta = batchnorm_bwd(rec.input, self.params, grad_out)
        return gx, {f"{self.name}.gamma": ggamma, f"{self.name}.beta": gbeta}

    def trainable_items(self):
        return [(f"{self.name}.gamma", self.params.gamma),
                (f"{self.name}.beta", self.params.beta)]

    def checkpoint_items(self):
        return self.trainable_items() + [
            (f"{self.name}.running_mean", self.params.running_mean),
            (f"{self.name}.running_var", self.params.running_var)]


class DropoutLayer:
    kind = "dropout"

    def __init__(self, name: str, rate: float):
        self.name = name
        self.rate = rate

    def forward(self, x, mode, rng):
        out, mask = dropout(x, self.rate, rng, mode)
        return out, LayerTrace(self.name, self.kind, x, out, dropout_mask=mask)

    def backward(self, rec, grad_out):
        return grad_out * rec.dropout_mask, {}

    def trainable_items(self):
        return []

    def checkpoint_items(self):
        return []


class ReluLayer:
    kind = "relu"

    def __init__(self, name: str):
        self.name = name

    def forward(self, x, mode, rng):
        out, mask = relu(x)
        return out, LayerTrace(self.name, self.kind, x, out, relu_mask=mask)

    def backward(self, rec, grad_out):
        return grad_out * rec.relu_mask, {}

    def trainable_items(self):
        return []

    def checkpoint_items(self):
        return []


class MaxPoolLayer:
    kind = "pool"

    def __init__(self, name: str, window: int = 2):
        self.name = name
        self.window = window

    def forward(self, x, mode, rng):
        out, switches = maxpool_fwd(x, self.window)
        return out, LayerTrace(self.name, self.kind, x, out, switches=switches)

    def backward(self, rec, grad_out):
        return unpool(grad_out, rec.switches, rec.input.shape), {}

    def trainable_items(self):
        return []

    def checkpoint_items(self):
        return []


class SequencerModel:
    """Flat layer list plus config; the last layer is always the class conv.

    ``version`` counts parameter updates so stale traces are rejected by
    the backward pass and the response-map engine.
    """

    def __init__(self, config: SequencerConfig, layers: list, dtype=RUN_DTYPE):
        self.config = config
        self.layers = layers
        self.dtype = np.dtype(dtype)
        self.version = 0

    def bump_version(self) -> None:
        self.version += 1

    def trainable_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            out.update(layer.trainable_items())
        return out

    def checkpoint_arrays(self) -> list[tuple[str, Tensor]]:
        out = []
        for layer in self.layers:
            out.extend(layer.checkpoint_items())
        return out

    @property
    def class_conv(self) -> ConvLayer:
        return self.layers[-1]


def _he_conv(rng: np.random.Generator, c_out: int, c_in: int, kernel: int,
             dtype) -> ConvParams:
    fan_in = c_in * kernel * kernel
    weights = rng.standard_normal((c_out, c_in, kernel, kernel))
    weights = (weights * np.sqrt(2.0 / fan_in)).astype(dtype)
    bias = np.zeros(c_out, dtype=dtype)
    return ConvParams(weights=weights, bias=bias, stride=1, padding=kernel // 2)


def _fresh_bn(channels: int, momentum: float, epsilon: float, dtype) -> BatchNormParams:
    return BatchNormParams(
        gamma=np.ones(channels, dtype=dtype),
        beta=np.zeros(channels, dtype=dtype),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
        momentum=momentum, epsilon=epsilon)


def build_sequencer(config: SequencerConfig, rng: np.random.Generator,
                    dtype=RUN_DTYPE) -> SequencerModel:
    """Construct a model with He fan-in initialized convs and fresh BN stats."""
    problems = validate_config(config)
    if problems:
        raise ConfigurationError(
            "invalid sequencer config:\n- " + "\n- ".join(problems))
    dtype = np.dtype(dtype)
    layers: list = []
    c_in = config.input_channels
    for i, cell in enumerate(config.cells):
        for j in range(cell.conv_count):
            layers.append(ConvLayer(f"cell{i}.conv{j}",
                                    _he_conv(rng, cell.channels, c_in, cell.kernel, dtype)))
            layers.append(BatchNormLayer(f"cell{i}.bn{j}",
                                         _fresh_bn(cell.channels, cell.bn_momentum,
                                                   config.bn_epsilon, dtype)))
            layers.append(DropoutLayer(f"cell{i}.dropout{j}", cell.dropout_rate))
            layers.append(ReluLayer(f"cell{i}.relu{j}"))
            c_in = cell.channels
        layers.append(MaxPoolLayer(f"cell{i}.pool", 2))
    fc = config.final_cell
    layers.append(ConvLayer("final.conv0", _he_conv(rng, fc.channels, c_in, fc.kernel, dtype)))
    layers.append(BatchNormLayer("final.bn0",
                                 _fresh_bn(fc.channels, fc.bn_momentum,
                                           config.bn_epsilon, dtype)))
    layers.append(DropoutLayer("final.dropout0", fc.dropout_rate))
    layers.append(ReluLayer("final.relu0"))
    layers.append(ConvLayer("final.class_conv",
                            _he_conv(rng, config.class_count, fc.channels, 1, dtype)))
    return SequencerModel(config, layers, dtype)


def forward(model: SequencerModel, batch: Tensor, mode: str = "infer",
            rng: np.random.Generator | None = None) -> tuple[Tensor, ForwardTrace]:
    """Run the full stack; returns per-sample class probabilities and a trace."""
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "train" and rng is None:
        raise ConfigurationError("train-mode forward needs an rng for dropout")
    batch = np.asarray(batch)
    cfg = model.config
    if batch.ndim != 4:
        raise DataError(f"batch must be rank-4 NCHW, got shape {batch.shape}")
    if batch.shape[1] != cfg.input_channels or batch.shape[2] != cfg.input_size \
            or batch.shape[3] != cfg.input_size:
        raise DataError(
            f"batch shape {batch.shape} does not match model input "
            f"({cfg.input_channels},{cfg.input_size},{cfg.input_size})")
    x = np.ascontiguousarray(batch, dtype=model.dtype)
    records: list[LayerTrace] = []
    for layer in model.layers:
        x, rec = layer.forward(x, mode, rng)
        records.append(rec)
    class_maps = x
    logits = gap(class_maps)
    probs = softmax_probs(logits)
    trace = ForwardTrace(mode=mode, model_version=model.version,
                         records=records, class_maps=class_maps,
                         logits=logits, probs=probs)
    return probs, trace


def backward(model: SequencerModel, trace: ForwardTrace,
             labels: np.ndarray) -> Gradients:
    """Loss gradients for every trainable parameter, from a train-mode trace."""
    if trace.model_version != model.version:
        raise InternalConsistencyError(
            f"trace was taken at model version {trace.model_version}, "
            f"model is now at {model.version}")
    if trace.mode != "train":
        raise InternalConsistencyError("backward needs a train-mode trace")
    if len(trace.records) != len(model.layers):
        raise InternalConsistencyError(
            f"trace has {len(trace.records)} layer records, model has "
            f"{len(model.layers)} layers")
    _, _, grad_logits = softmax_xent(trace.logits, labels)
    h, w = trace.class_maps.shape[2], trace.class_maps.shape[3]
    # GAP backward: spread each logit gradient uniformly over its map
    grad = np.broadcast_to(grad_logits / (h * w), trace.class_maps.shape)
    grad = np.ascontiguousarray(grad, dtype=model.dtype)
    grads: Gradients = {}
    for layer, rec in zip(reversed(model.layers), reversed(trace.records)):
        grad, pgrads = layer.backward(rec, grad)
        grads.update(pgrads)
    return grads


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float = 1e-5,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0)
        for name, value in params.items():
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        return state


def adam_step(params: dict[str, Tensor], grads: Gradients,
              state: AdamState) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, theta in params.items():
        if name not in grads:
            raise InternalConsistencyError(f"no gradient supplied for {name!r}")
        g = grads[name]
        if g.shape != theta.shape:
            raise InternalConsistencyError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        m_hat = m / bc1
        v_hat = v / bc2
        theta -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class TrainSchedule:
    epochs: int
    batch_size: int = 128
    lr: float = 1e-5
    seed: int = 0


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    history: list[EpochStats]
    best_epoch: int
    best_val_accuracy: float


def _check_dataset(x: Tensor, labels: np.ndarray, class_count: int,
                   part: str) -> tuple[Tensor, np.ndarray]:
    x = np.asarray(x)
    labels = np.asarray(labels)
    if x.ndim != 4 or x.shape[0] == 0:
        raise DataError(f"{part} set must be a non-empty rank-4 batch, "
                        f"got shape {x.shape}")
    if labels.shape != (x.shape[0],):
        raise DataError(f"{part} labels shape {labels.shape} does not match "
                        f"{x.shape[0]} samples")
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise DataError(f"{part} labels must lie in [0,{class_count})")
    return x, labels.astype(np.int64)


def _evaluate(model: SequencerModel, x: Tensor, labels: np.ndarray,
              batch_size: int) -> tuple[float, float]:
    total_loss = 0.0
    correct = 0
    n = x.shape[0]
    for start in range(0, n, batch_size):
        xb = x[start:start + batch_size]
        yb = labels[start:start + batch_size]
        probs, trace = forward(model, xb, "infer")
        _, loss, _ = softmax_xent(trace.logits, yb)
        total_loss += loss * xb.shape[0]
        flat = probs.reshape(xb.shape[0], -1)
        correct += int(np.sum(np.argmax(flat, axis=1) == yb))
    return total_loss / n, correct / n


def train(model: SequencerModel, train_set: tuple[Tensor, np.ndarray],
          val_set: tuple[Tensor, np.ndarray],
          schedule: TrainSchedule) -> tuple[SequencerModel, TrainResult]:
    """Adam training with a seeded shuffle; keeps the best-val-accuracy state.

    Partial final batches are included.  On validation-accuracy ties the
    earliest epoch's snapshot is retained.  Fully deterministic per seed.
    """
    if schedule.epochs < 1:
        raise ConfigurationError(f"epochs must be >= 1, got {schedule.epochs}")
    if schedule.batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {schedule.batch_size}")
    cfg = model.config
    train_x, train_y = _check_dataset(*train_set, cfg.class_count, "train")
    val_x, val_y = _check_dataset(*val_set, cfg.class_count, "validation")
    rng = np.random.default_rng(schedule.seed)
    state = AdamState.for_params(model.trainable_params(), lr=schedule.lr)
    n = train_x.shape[0]
    history: list[EpochStats] = []
    best_val = -1.0
    best_epoch = -1
    best_snapshot: list[tuple[str, Tensor]] | None = None
    for epoch in range(schedule.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        epoch_correct = 0
        for batch_index, start in enumerate(range(0, n, schedule.batch_size)):
            idx = perm[start:start + schedule.batch_size]
            xb = train_x[idx]
            yb = train_y[idx]
            try:
                probs, trace = forward(model, xb, "train", rng)
                _, loss, _ = softmax_xent(trace.logits, yb)
            except NumericError as exc:
                raise NumericError(
                    f"divergence at epoch {epoch}, batch {batch_index}: {exc}"
                ) from exc
            if not np.isfinite(loss):
                raise NumericError(
                    f"training loss became non-finite at epoch {epoch}, "
                    f"batch {batch_index}")
            grads = backward(model, trace, yb)
            adam_step(model.trainable_params(), grads, state)
            model.bump_version()
            epoch_loss += loss * xb.shape[0]
            flat = probs.reshape(xb.shape[0], -1)
            epoch_correct += int(np.sum(np.argmax(flat, axis=1) == yb))
        val_loss, val_acc = _evaluate(model, val_x, val_y, schedule.batch_size)
        history.append(EpochStats(epoch=epoch,
                                  train_loss=epoch_loss / n,
                                  train_accuracy=epoch_correct / n,
                                  val_loss=val_loss,
                                  val_accuracy=val_acc))
        if val_acc > best_val:
            best_val = val_acc
            best_epoch = epoch
            best_snapshot = [(name, arr.copy())
                             for name, arr in model.checkpoint_arrays()]
    if best_snapshot is not None:
        live = dict(model.checkpoint_arrays())
        for name, saved in best_snapshot:
            live[name][...] = saved
        model.bump_version()
    return model, TrainResult(history=history, best_epoch=best_epoch,
                              best_val_accuracy=best_val)


def predict(model: SequencerModel, image: Tensor) -> tuple[int, float]:
    """Argmax class and its probability for one image; ties go to the lowest id."""
    image = np.asarray(image)
    cfg = model.config
    if image.ndim == 2:
        image = image[None, None]
    elif image.ndim == 3 and image.shape[0] == cfg.input_channels:
        image = image[None]
    elif image.ndim == 4 and image.shape[0] == 1:
        pass
    else:
        raise DataError(f"expected one image, got shape {image.shape}")
    probs, _ = forward(model, image, "infer")
    flat = probs.reshape(-1)
    cls = int(np.argmax(flat))
    return cls, float(flat[cls])


CHECKPOINT_MAGIC = b"SISC"
CHECKPOINT_VERSION = 1


def _config_text(config: SequencerConfig) -> str:
    cells = ",".join(
        f"{c.channels}:{c.conv_count}:{c.kernel}:{c.dropout_rate!r}:{c.bn_momentum!r}"
        for c in config.cells)
    fc = config.final_cell
    lines = [
        "format = sisc-sequencer",
        f"input_size = {config.input_size}",
        f"input_channels = {config.input_channels}",
        f"class_count = {config.class_count}",
        f"bn_epsilon = {config.bn_epsilon!r}",
        f"cells = {cells}",
        f"final_cell = {fc.channels}:{fc.kernel}:{fc.dropout_rate!r}:{fc.bn_momentum!r}",
    ]
    return "\n".join(lines) + "\n"


def _parse_config_text(text: str) -> SequencerConfig:
    pairs: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise CheckpointStructureError(f"malformed config line {line!r}")
        key, _, value = line.partition("=")
        pairs[key.strip()] = value.strip()
    required = {"format", "input_size", "input_channels", "class_count",
                "bn_epsilon", "cells", "final_cell"}
    missing = required - pairs.keys()
    unknown = pairs.keys() - required
    if missing or unknown:
        raise CheckpointStructureError(
            f"config block missing keys {sorted(missing)}, unknown keys "
            f"{sorted(unknown)}")
    if pairs["format"] != "sisc-sequencer":
        raise CheckpointStructureError(f"unknown format {pairs['format']!r}")
    try:
        cells = []
        for chunk in pairs["cells"].split(","):
            ch, cc, k, dr, mom = chunk.split(":")
            cells.append(CellConfig(channels=int(ch), conv_count=int(cc),
                                    kernel=int(k), dropout_rate=float(dr),
                                    bn_momentum=float(mom)))
        fch, fk, fdr, fmom = pairs["final_cell"].split(":")
        final = FinalCellConfig(channels=int(fch), kernel=int(fk),
                                dropout_rate=float(fdr), bn_momentum=float(fmom))
        config = SequencerConfig(cells=tuple(cells), final_cell=final,
                                 input_size=int(pairs["input_size"]),
                                 input_channels=int(pairs["input_channels"]),
                                 class_count=int(pairs["class_count"]),
                                 bn_epsilon=float(pairs["bn_epsilon"]))
    except ValueError as exc:
        raise CheckpointStructureError(f"unparseable config value: {exc}") from exc
    problems = validate_config(config)
    if problems:
        raise CheckpointStructureError(
            "config block fails validation:\n- " + "\n- ".join(problems))
    return config


def save_checkpoint(model: SequencerModel, path) -> None:
    """Self-describing binary: magic, u32 format version, u32 config-text
    length, the key=value config text, float32 LE parameter blobs in layer
    declaration order (conv: weights, bias; batchnorm: gamma, beta,
    running_mean, running_var), then a CRC-32 of everything prior."""
    cfg_bytes = _config_text(model.config).encode("utf-8")
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<I", len(cfg_bytes)),
             cfg_bytes]
    for _, arr in model.checkpoint_arrays():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(parts)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(payload + struct.pack("<I", crc))


def load_checkpoint(path) -> SequencerModel:
    """Inverse of save_checkpoint; never returns a partially filled model."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise CheckpointChecksumError(
            f"file holds only {len(data)} bytes, too short for a checkpoint")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"bad magic bytes {data[:4]!r}")
    version = struct.unpack("<I", data[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"format version {version} is not supported (expected "
            f"{CHECKPOINT_VERSION})")
    if len(data) < 16:
        raise CheckpointChecksumError(
            f"file holds only {len(data)} bytes, too short for a checkpoint")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    actual_crc = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointChecksumError(
            f"CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")
    cfg_len = struct.unpack("<I", data[8:12])[0]
    if 12 + cfg_len + 4 > len(data):
        raise CheckpointStructureError(
            f"config length {cfg_len} exceeds file size {len(data)}")
    config = _parse_config_text(data[12:12 + cfg_len].decode("utf-8"))
    model = build_sequencer(config, np.random.default_rng(0), dtype=RUN_DTYPE)
    blob = data[12 + cfg_len:-4]
    arrays = model.checkpoint_arrays()
    expected = sum(arr.size for _, arr in arrays) * 4
    if len(blob) != expected:
        raise CheckpointStructureError(
            f"parameter blob holds {len(blob)} bytes, config implies {expected}")
    offset = 0
    for _, arr in arrays:
        flat = np.frombuffer(blob, dtype="<f4", count=arr.size, offset=offset)
        arr[...] = flat.reshape(arr.shape)
        offset += arr.size * 4
    return model
