"""From-scratch CNN/MLP numerics: forward/backward pass, SGD updates, evaluation,
and the binary wire format used for checkpoints and object-store payloads.

Everything here is a pure function of its inputs; parameter vectors are
immutable flat float64 arrays so they can be passed freely between tasks.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
import zlib
from dataclasses import dataclass
from functools import lru_cache
from math import sqrt
from typing import Optional, Sequence, Tuple

import numpy as np


class ModelError(Exception):
    pass


class NonFiniteError(ModelError):
    """A layer produced NaN/Inf activations (carries the layer index)."""

    def __init__(self, layer_index: int, what: str = "activation"):
        self.layer_index = layer_index
        super().__init__(f"non-finite {what} at layer {layer_index}")


class LayoutMismatchError(ModelError):
    pass


class CorruptPayloadError(ModelError):
    pass


# ---------------------------------------------------------------------------
# Model description


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Dropout:
    rate: float


@dataclass(frozen=True)
class ModelSpec:
    """Layer stack ending in an implicit softmax cross-entropy head."""

    layers: tuple
    input_shape: Tuple[int, int, int] = (1, 28, 28)
    num_classes: int = 10

    def __post_init__(self):
        _shapes(self)  # validates the chain eagerly


def fashion_cnn(num_filters=(16, 32), dense_units=512, dropout_rate=0.25,
                input_shape=(1, 28, 28), num_classes=10) -> ModelSpec:
    """Two conv/relu/pool blocks, a dense+relu+dropout stage, and a class head."""
    return ModelSpec(
        layers=(
            Conv(num_filters[0]), Relu(), MaxPool(2),
            Conv(num_filters[1]), Relu(), MaxPool(2),
            Flatten(),
            Dense(dense_units), Relu(), Dropout(dropout_rate),
            Dense(num_classes),
        ),
        input_shape=input_shape,
        num_classes=num_classes,
    )


def small_cnn() -> ModelSpec:
    """Reduced-width variant of fashion_cnn for fast tests and runs."""
    return fashion_cnn(num_filters=(4, 8), dense_units=64)


def mlp(hidden: Sequence[int] = (32,), input_shape=(1, 28, 28), num_classes=10) -> ModelSpec:
    layers: list = [Flatten()]
    for units in hidden:
        layers += [Dense(units), Relu()]
    layers += [Dense(num_classes)]
    return ModelSpec(layers=tuple(layers), input_shape=input_shape, num_classes=num_classes)


@lru_cache(maxsize=None)
def _shapes(spec: ModelSpec) -> tuple:
    """Output shape of every layer; raises if the chain is inconsistent."""
    shape = tuple(spec.input_shape)
    out = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            if len(shape) != 3:
                raise ModelError(f"layer {i}: conv needs (C,H,W) input, got {shape}")
            if layer.stride != 1:
                raise ModelError(f"layer {i}: only stride-1 convolutions are supported")
            c, h, w = shape
            oh = h + 2 * layer.padding - layer.kernel + 1
            ow = w + 2 * layer.padding - layer.kernel + 1
            if oh <= 0 or ow <= 0:
                raise ModelError(f"layer {i}: kernel {layer.kernel} too large for {shape}")
            shape = (layer.out_channels, oh, ow)
        elif isinstance(layer, MaxPool):
            if len(shape) != 3:
                raise ModelError(f"layer {i}: maxpool needs (C,H,W) input, got {shape}")
            c, h, w = shape
            m = layer.window
            if h % m or w % m:
                raise ModelError(f"layer {i}: pool window {m} does not divide {shape}")
            shape = (c, h // m, w // m)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Dense):
            if len(shape) != 1:
                raise ModelError(f"layer {i}: dense needs flat input, got {shape}")
            shape = (layer.units,)
        elif isinstance(layer, (Relu, Dropout)):
            pass
        else:
            raise ModelError(f"layer {i}: unknown layer {layer!r}")
        out.append(shape)
    if len(out[-1]) != 1 or out[-1][0] != spec.num_classes:
        raise ModelError(f"final layer must emit {spec.num_classes} logits, got {out[-1]}")
    return tuple(out)


@lru_cache(maxsize=None)
def layout(spec: ModelSpec) -> tuple:
    """Flat-vector layout: (name, offset, shape) per parameter tensor."""
    entries = []
    offset = 0
    shape = tuple(spec.input_shape)
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            in_c = shape[0]
            wshape = (layer.out_channels, in_c, layer.kernel, layer.kernel)
            entries.append((f"conv{i}.w", offset, wshape))
            offset += int(np.prod(wshape))
            entries.append((f"conv{i}.b", offset, (layer.out_channels,)))
            offset += layer.out_channels
        elif isinstance(layer, Dense):
            wshape = (shape[0], layer.units)
            entries.append((f"dense{i}.w", offset, wshape))
            offset += int(np.prod(wshape))
            entries.append((f"dense{i}.b", offset, (layer.units,)))
            offset += layer.units
        shape = _shapes(spec)[i]
    return tuple(entries)


def param_count(spec: ModelSpec) -> int:
    entries = layout(spec)
    if not entries:
        return 0
    name, offset, shape = entries[-1]
    return offset + int(np.prod(shape))


def layout_hash(spec: ModelSpec) -> int:
    text = ";".join(f"{n}:{o}:{'x'.join(map(str, s))}" for n, o, s in layout(spec))
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


# ---------------------------------------------------------------------------
# Parameter and gradient vectors


def _frozen(arr: np.ndarray) -> np.ndarray:
    if (isinstance(arr, np.ndarray) and not arr.flags.writeable
            and arr.dtype == np.float64 and arr.flags.c_contiguous):
        return arr
    out = np.array(arr, dtype=np.float64, order="C")  # copy: never freeze caller data
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ParamVector:
    data: np.ndarray
    spec: ModelSpec
    step: int = 0

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        if self.data.shape != (param_count(self.spec),):
            raise LayoutMismatchError(
                f"parameter vector has {self.data.shape[0]} entries, "
                f"layout expects {param_count(self.spec)}")


@dataclass(frozen=True)
class GradientUpdate:
    data: np.ndarray
    base_step: int
    worker_id: int = -1
    batch_id: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))


def _tensors(params: ParamVector) -> dict:
    views = {}
    for name, offset, shape in layout(params.spec):
        views[name] = params.data[offset:offset + int(np.prod(shape))].reshape(shape)
    return views


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """He-style uniform fan-in init for weights, zero biases. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    flat = np.zeros(param_count(spec))
    for name, offset, shape in layout(spec):
        n = int(np.prod(shape))
        if name.endswith(".b"):
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        limit = sqrt(6.0 / fan_in)
        flat[offset:offset + n] = rng.uniform(-limit, limit, size=n)
    return ParamVector(flat, spec, step=0)


# ---------------------------------------------------------------------------
# Forward / backward


def _windows(x: np.ndarray, kernel: int) -> np.ndarray:
    """Stride-1 sliding windows of shape (N, C, OH, OW, k, k) over x (N, C, H, W)."""
    n, c, h, w = x.shape
    oh, ow = h - kernel + 1, w - kernel + 1
    sn, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (n, c, oh, ow, kernel, kernel), (sn, sc, sh, sw, sh, sw))


def _forward(spec: ModelSpec, params: ParamVector, images: np.ndarray,
             train: bool, dropout_rng: Optional[np.random.Generator]):
    tensors = _tensors(params)
    x = images
    caches = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            p = layer.padding
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
            win = _windows(xp, layer.kernel)
            out = np.einsum("bihwkl,oikl->bohw", win, tensors[f"conv{i}.w"], optimize=True)
            out += tensors[f"conv{i}.b"][None, :, None, None]
            caches.append((xp, win))
            x = out
        elif isinstance(layer, Relu):
            caches.append(x > 0)
            x = np.maximum(x, 0.0)
        elif isinstance(layer, MaxPool):
            m = layer.window
            n, c, h, w = x.shape
            regions = (x.reshape(n, c, h // m, m, w // m, m)
                        .transpose(0, 1, 2, 4, 3, 5)
                        .reshape(n, c, h // m, w // m, m * m))
            idx = np.argmax(regions, axis=-1)
            caches.append((x.shape, idx))
            x = np.take_along_axis(regions, idx[..., None], axis=-1)[..., 0]
        elif isinstance(layer, Flatten):
            caches.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dense):
            caches.append(x)
            x = x @ tensors[f"dense{i}.w"] + tensors[f"dense{i}.b"]
        elif isinstance(layer, Dropout):
            if train:
                mask = (dropout_rng.random(x.shape) >= layer.rate) / (1.0 - layer.rate)
                caches.append(mask)
                x = x * mask
            else:
                caches.append(None)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(i)
    return x, tensors, caches


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    n = logits.shape[0]
    loss = float(np.mean(logsum - shifted[np.arange(n), labels]))
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def training_loss(params: ParamVector, batch, dropout_seed: int) -> float:
    """Training-mode loss with the dropout mask pinned by `dropout_seed`.

    Shares the exact objective with loss_and_grad, which makes it the probe
    function for finite-difference checks of the analytic gradients.
    """
    rng = np.random.default_rng(dropout_seed)
    logits, _, _ = _forward(params.spec, params, batch.images, True, rng)
    loss, _ = _softmax_xent(logits, batch.labels)
    return loss


def loss_and_grad(params: ParamVector, batch, dropout_seed: int):
    """Mean cross-entropy over the batch and its gradient w.r.t. all parameters."""
    spec = params.spec
    if batch.images.shape[1:] != tuple(spec.input_shape):
        raise LayoutMismatchError(
            f"batch images {batch.images.shape[1:]} do not match model input {spec.input_shape}")
    if len(batch.labels) == 0:
        raise ValueError("empty batch")
    rng = np.random.default_rng(dropout_seed)
    logits, tensors, caches = _forward(spec, params, batch.images, True, rng)
    loss, delta = _softmax_xent(logits, batch.labels)

    grad = np.zeros_like(params.data)
    grads = {name: grad[off:off + int(np.prod(shape))].reshape(shape)
             for name, off, shape in layout(spec)}
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        cache = caches[i]
        if isinstance(layer, Dense):
            x = cache
            grads[f"dense{i}.w"][...] = x.T @ delta
            grads[f"dense{i}.b"][...] = delta.sum(axis=0)
            delta = delta @ tensors[f"dense{i}.w"].T
        elif isinstance(layer, Relu):
            delta = delta * cache
        elif isinstance(layer, Dropout):
            if cache is not None:
                delta = delta * cache
        elif isinstance(layer, Flatten):
            delta = delta.reshape(cache)
        elif isinstance(layer, MaxPool):
            in_shape, idx = cache
            n, c, h, w = in_shape
            m = layer.window
            dregions = np.zeros((n, c, h // m, w // m, m * m))
            np.put_along_axis(dregions, idx[..., None], delta[..., None], axis=-1)
            delta = (dregions.reshape(n, c, h // m, w // m, m, m)
                     .transpose(0, 1, 2, 4, 3, 5)
                     .reshape(in_shape))
        elif isinstance(layer, Conv):
            xp, win = cache
            kernel = tensors[f"conv{i}.w"]
            grads[f"conv{i}.b"][...] = delta.sum(axis=(0, 2, 3))
            grads[f"conv{i}.w"][...] = np.einsum("bihwkl,bohw->oikl", win, delta, optimize=True)
            k, p = layer.kernel, layer.padding
            dpad = np.pad(delta, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
            dwin = _windows(dpad, k)
            rot = kernel[:, :, ::-1, ::-1]
            dxp = np.einsum("bohwkl,oikl->bihw", dwin, rot, optimize=True)
            delta = dxp[:, :, p:xp.shape[2] - p, p:xp.shape[3] - p] if p else dxp
        if not np.all(np.isfinite(delta)):
            raise NonFiniteError(i, "gradient")
    worker = batch.batch_id[1] if len(batch.batch_id) >= 2 else -1
    return loss, GradientUpdate(grad, base_step=params.step,
                                worker_id=worker, batch_id=tuple(batch.batch_id))


def evaluate(params: ParamVector, dataset, chunk: int = 256):
    """(accuracy, mean loss) with dropout disabled; argmax ties go to the lowest class.

    `dataset` is anything with .images and .labels (a Dataset or a Batch).
    """
    images, labels = dataset.images, dataset.labels
    if len(labels) == 0:
        raise ValueError("empty dataset")
    correct = 0
    total_loss = 0.0
    for start in range(0, len(labels), chunk):
        imgs = images[start:start + chunk]
        labs = labels[start:start + chunk]
        logits, _, _ = _forward(params.spec, params, imgs, False, None)
        loss, _ = _softmax_xent(logits, labs)
        total_loss += loss * len(labs)
        correct += int(np.sum(np.argmax(logits, axis=1) == labs))
    return correct / len(labels), total_loss / len(labels)


# ---------------------------------------------------------------------------
# SGD with pending-gradient learning-rate down-tuning


def _rule_inverse_sqrt_excess(base: float, c: int, k: int) -> float:
    return base * min(1.0, sqrt(c / k))


def _rule_constant(base: float, c: int, k: int) -> float:
    return base


LR_RULES = {
    "inverse-sqrt-excess": _rule_inverse_sqrt_excess,
    "constant": _rule_constant,
}


@dataclass(frozen=True)
class LrPolicy:
    """Base rate plus a rule that shrinks it when many updates are pending."""

    base_lr: float
    pending_threshold: int = 1
    rule: str = "inverse-sqrt-excess"

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.pending_threshold < 1:
            raise ValueError("pending_threshold must be >= 1")
        if self.rule not in LR_RULES:
            raise ValueError(f"unknown lr rule {self.rule!r}")

    def effective_lr(self, pending: int) -> float:
        if pending <= 1:
            return self.base_lr
        lr = LR_RULES[self.rule](self.base_lr, self.pending_threshold, pending)
        return min(self.base_lr, max(lr, 0.0))


def apply_gradients(params: ParamVector, updates: Sequence[GradientUpdate],
                    policy: LrPolicy) -> ParamVector:
    """Apply updates sequentially at the down-tuned rate for this backlog size.

    Returns a fresh vector; the input is never mutated. A non-finite result
    rejects that single update (with a warning) instead of poisoning the weights.
    """
    if not updates:
        return params
    n = params.data.shape[0]
    for u in updates:
        if u.data.shape != (n,):
            raise LayoutMismatchError(
                f"gradient has {u.data.shape[0]} entries, params have {n}")
        if u.base_step > params.step:
            raise ValueError(
                f"gradient base_step {u.base_step} is ahead of weights step {params.step}")
    lr = policy.effective_lr(len(updates))
    data = params.data.copy()
    step = params.step
    for u in updates:
        candidate = data - lr * u.data
        if not np.all(np.isfinite(candidate)):
            warnings.warn(f"rejecting non-finite update from worker {u.worker_id}")
            continue
        data = candidate
        step += 1
    return ParamVector(data, params.spec, step=step)


def average_gradients(updates: Sequence[GradientUpdate]) -> GradientUpdate:
    """Mean of worker gradients, used by the synchronous barrier step."""
    if not updates:
        raise ValueError("nothing to average")
    mean = np.mean([u.data for u in updates], axis=0)
    return GradientUpdate(mean, base_step=max(u.base_step for u in updates),
                          worker_id=-1, batch_id=("sync",))


# ---------------------------------------------------------------------------
# Wire format: magic | u16 version | u64 step | u64 layout hash | u64 count
#              | little-endian float64 payload | crc32 of everything above

MAGIC_PARAMS = b"FPSV"
MAGIC_GRAD = b"FPSG"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHQQQ")


def _pack(magic: bytes, step: int, spec: ModelSpec, data: np.ndarray) -> bytes:
    body = _HEADER.pack(magic, FORMAT_VERSION, step, layout_hash(spec), data.shape[0])
    body += np.ascontiguousarray(data, dtype="<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def _unpack(payload: bytes, magic: bytes, spec: ModelSpec):
    if len(payload) < _HEADER.size + 4:
        raise CorruptPayloadError("payload truncated")
    body, crc = payload[:-4], struct.unpack("<I", payload[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CorruptPayloadError("checksum mismatch")
    got_magic, version, step, lhash, count = _HEADER.unpack_from(body)
    if got_magic != magic:
        raise CorruptPayloadError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptPayloadError(f"unsupported format version {version}")
    if lhash != layout_hash(spec):
        raise LayoutMismatchError("payload layout does not match the model spec")
    expected = param_count(spec)
    if count != expected or len(body) != _HEADER.size + 8 * expected:
        raise CorruptPayloadError("element count mismatch")
    data = np.frombuffer(body, dtype="<f8", offset=_HEADER.size, count=expected)
    return step, data.astype(np.float64)


def serialize_params(params: ParamVector) -> bytes:
    return _pack(MAGIC_PARAMS, params.step, params.spec, params.data)


def deserialize_params(payload: bytes, spec: ModelSpec) -> ParamVector:
    step, data = _unpack(payload, MAGIC_PARAMS, spec)
    return ParamVector(data, spec, step=step)


def serialize_gradient(grad: GradientUpdate, spec: ModelSpec) -> bytes:
    return _pack(MAGIC_GRAD, grad.base_step, spec, grad.data)


def deserialize_gradient(payload: bytes, spec: ModelSpec,
                         worker_id: int = -1, batch_id: tuple = ()) -> GradientUpdate:
    base_step, data = _unpack(payload, MAGIC_GRAD, spec)
    return GradientUpdate(data, base_step=base_step,
                          worker_id=worker_id, batch_id=tuple(batch_id))


def params_digest(params: ParamVector) -> str:
    """Stable content hash of (step, weights); used by run traces and tests."""
    h = hashlib.sha256()
    h.update(struct.pack("<Q", params.step))
    h.update(np.ascontiguousarray(params.data, dtype="<f8").tobytes())
    return h.hexdigest()
