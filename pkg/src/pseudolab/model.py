"""Layer stacks: the small CNN, the MLP baseline, supervised training, and
checkpoint I/O.

Layers are stateless in the forward direction: ``forward`` returns
``(output, cache)`` and ``backward`` consumes the cache, so a model can be
shared read-only across threads during inference while training keeps
exclusive access.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .errors import CheckpointError, ConfigError, NumericsError, ShapeError, ValidationError
from .rng import RngState
from .tensor import ConvParams, Tensor, as_f64

CHECKPOINT_MAGIC = b"PSLB"
CHECKPOINT_VERSION = 1


def glorot_uniform(gen: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# layers


class Conv2d:
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, *, gen: np.random.Generator):
        k = kernel_size
        fan_in, fan_out = in_channels * k * k, out_channels * k * k
        kernel = glorot_uniform(gen, (out_channels, in_channels, k, k), fan_in, fan_out)
        self.params = ConvParams(Tensor(kernel), Tensor(np.zeros(out_channels)),
                                 stride=stride, padding=padding)

    def forward(self, x):
        return ops.conv2d(x, self.params), x

    def backward(self, grad_out, cache):
        grad_x, gk, gb = ops.conv2d_backward(grad_out, cache, self.params)
        self.params.kernel.grad = gk
        self.params.bias.grad = gb
        return grad_x

    def parameters(self):
        return [("kernel", self.params.kernel), ("bias", self.params.bias)]

    def output_shape(self, in_shape):
        c, h, w = in_shape
        ho, wo = ops.conv2d_output_hw(h, w, self.params)
        return (self.params.out_channels, ho, wo)


class ReLU:
    def forward(self, x):
        return ops.relu(x), x

    def backward(self, grad_out, cache):
        return ops.relu_backward(grad_out, cache)

    def parameters(self):
        return []

    def output_shape(self, in_shape):
        return in_shape


class MaxPool2:
    def forward(self, x):
        return ops.maxpool2(x), x

    def backward(self, grad_out, cache):
        return ops.maxpool2_backward(grad_out, cache)

    def parameters(self):
        return []

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if h < 2 or w < 2:
            raise ConfigError(f"maxpool2 needs spatial extents >= 2, got {h}x{w}")
        return (c, h // 2, w // 2)


class Flatten:
    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad_out, cache):
        return grad_out.reshape(cache)

    def parameters(self):
        return []

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class Dense:
    def __init__(self, in_features: int, out_features: int, *, gen: np.random.Generator):
        self.weights = Tensor(glorot_uniform(gen, (in_features, out_features),
                                             in_features, out_features))
        self.bias = Tensor(np.zeros(out_features))

    def forward(self, x):
        return ops.dense(x, self.weights.data, self.bias.data), x

    def backward(self, grad_out, cache):
        grad_x, gw, gb = ops.dense_backward(grad_out, cache, self.weights.data)
        self.weights.grad = gw
        self.bias.grad = gb
        return grad_x

    def parameters(self):
        return [("weights", self.weights), ("bias", self.bias)]

    def output_shape(self, in_shape):
        (d,) = in_shape
        if d != self.weights.shape[0]:
            raise ShapeError(f"dense expects {self.weights.shape[0]} features, got {d}")
        return (self.weights.shape[1],)


# ---------------------------------------------------------------------------
# architecture descriptors


@dataclass(frozen=True)
class CnnArch:
    """Channel widths and kernel geometry of the conv/relu/pool stack."""

    conv_channels: tuple[int, ...] = (16, 32)
    kernel_size: int = 3
    padding: int = 1
    dense_width: int = 128

    def to_dict(self) -> dict:
        return {"kind": "cnn", "conv_channels": list(self.conv_channels),
                "kernel_size": self.kernel_size, "padding": self.padding,
                "dense_width": self.dense_width}


@dataclass(frozen=True)
class MlpArch:
    """Hidden widths of the flattened-pixel baseline."""

    hidden: tuple[int, ...] = (256,)

    def to_dict(self) -> dict:
        return {"kind": "mlp", "hidden": list(self.hidden)}


def arch_from_dict(d: dict) -> "CnnArch | MlpArch":
    kind = d.get("kind")
    if kind == "cnn":
        return CnnArch(tuple(d["conv_channels"]), d["kernel_size"], d["padding"], d["dense_width"])
    if kind == "mlp":
        return MlpArch(tuple(d["hidden"]))
    raise CheckpointError(f"unknown architecture kind {kind!r}")


# ---------------------------------------------------------------------------
# model


class Model:
    """An ordered stack of named layers producing class logits, read out by softmax."""

    def __init__(self, layers: list[tuple[str, object]], input_shape: tuple[int, int, int],
                 n_classes: int, arch: "CnnArch | MlpArch"):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self.arch = arch
        self._validate_stack()

    def _validate_stack(self) -> None:
        shape = self.input_shape
        self._shapes = {}
        for name, layer in self.layers:
            shape = layer.output_shape(shape)
            self._shapes[name] = shape
        if shape != (self.n_classes,):
            raise ConfigError(f"stack ends with shape {shape}, expected ({self.n_classes},)")

    # -- inference ---------------------------------------------------------

    def _check_images(self, images: np.ndarray) -> np.ndarray:
        images = as_f64(images)
        if images.ndim != 4 or images.shape[1:] != self.input_shape:
            raise ShapeError(
                f"images shape {images.shape} incompatible with model input {self.input_shape}"
            )
        return images

    def forward_with_caches(self, images: np.ndarray):
        x = self._check_images(images)
        caches = []
        for _, layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def forward_logits(self, images: np.ndarray) -> np.ndarray:
        return self.forward_with_caches(images)[0]

    def backward_from_logits(self, grad_logits: np.ndarray, caches) -> np.ndarray:
        grad = grad_logits
        for (_, layer), cache in zip(reversed(self.layers), reversed(caches)):
            grad = layer.backward(grad, cache)
        return grad

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        """Row-wise softmax distributions; inference mutates nothing."""
        logits = self.forward_logits(images)
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        return expd / expd.sum(axis=1, keepdims=True)

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(images), axis=1)

    def layer_names(self) -> list[str]:
        return [name for name, _ in self.layers] + ["softmax"]

    def extract_features(self, images: np.ndarray, layer_name: str) -> np.ndarray:
        """Activations at the named layer for each input image."""
        if layer_name == "softmax":
            return self.predict_proba(images)
        names = [name for name, _ in self.layers]
        if layer_name not in names:
            raise LookupError(
                f"unknown layer {layer_name!r}; valid names: {', '.join(self.layer_names())}"
            )
        x = self._check_images(images)
        for name, layer in self.layers:
            x, _ = layer.forward(x)
            if name == layer_name:
                return x
        raise AssertionError("unreachable")

    def logit_gradient_at(self, layer_name: str, images: np.ndarray,
                          target_class: int) -> tuple[np.ndarray, np.ndarray]:
        """(activations, d logit[target] / d activations) at the named layer.

        The gradient is of the summed pre-softmax score of ``target_class``
        over the batch, computed with the same backward kernels as training.
        """
        names = [name for name, _ in self.layers]
        if layer_name not in names:
            raise LookupError(
                f"unknown layer {layer_name!r}; valid names: {', '.join(self.layer_names())}"
            )
        if not 0 <= target_class < self.n_classes:
            raise ValidationError(f"target class {target_class} not in [0, {self.n_classes})")
        logits, caches = self.forward_with_caches(images)
        grad = np.zeros_like(logits)
        grad[:, target_class] = 1.0
        idx = names.index(layer_name)
        activations = None
        x = self._check_images(images)
        for name, layer in self.layers[:idx + 1]:
            x, _ = layer.forward(x)
        activations = x
        for (_, layer), cache in zip(reversed(self.layers[idx + 1:]), reversed(caches[idx + 1:])):
            grad = layer.backward(grad, cache)
        return activations, grad

    def forward_from(self, layer_name: str, activations: np.ndarray) -> np.ndarray:
        """Logits from the layers strictly after ``layer_name`` (finite-difference seam)."""
        names = [name for name, _ in self.layers]
        idx = names.index(layer_name)
        x = activations
        for _, layer in self.layers[idx + 1:]:
            x, _ = layer.forward(x)
        return x

    # -- parameters ----------------------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, layer in self.layers:
            for pname, tensor in layer.parameters():
                out.append((f"{name}.{pname}", tensor))
        return out

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def get_layer(self, layer_name: str):
        for name, layer in self.layers:
            if name == layer_name:
                return layer
        raise LookupError(
            f"unknown layer {layer_name!r}; valid names: {', '.join(self.layer_names())}"
        )

    def conv_layer_names(self) -> list[str]:
        return [name for name, layer in self.layers if isinstance(layer, Conv2d)]

    def clone_fresh(self, rng: RngState) -> "Model":
        """A new model of the same architecture with freshly initialized parameters."""
        if isinstance(self.arch, CnnArch):
            return build_cnn(self.input_shape, self.n_classes, self.arch, rng)
        return build_mlp(self.input_shape, self.n_classes, self.arch, rng)

    # -- checkpoint I/O ------------------------------------------------------

    def save(self, path) -> None:
        """Write the versioned binary checkpoint (layout documented in README)."""
        header = {
            "architecture": self.arch.to_dict(),
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
            "params": [{"name": n, "shape": list(t.shape)} for n, t in self.parameters()],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_VERSION))
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for _, tensor in self.parameters():
                fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Model":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {raw[:4]!r} (expected {CHECKPOINT_MAGIC!r})")
        if len(raw) < 12:
            raise CheckpointError("truncated checkpoint: header fields missing")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack_from("<I", raw, 8)
        if len(raw) < 12 + hlen:
            raise CheckpointError("truncated checkpoint: header_json shorter than declared")
        try:
            header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint header_json: {exc}") from exc
        for key in ("architecture", "input_shape", "n_classes", "params"):
            if key not in header:
                raise CheckpointError(f"checkpoint header missing field {key!r}")
        arch = arch_from_dict(header["architecture"])
        model = (build_cnn if isinstance(arch, CnnArch) else build_mlp)(
            tuple(header["input_shape"]), header["n_classes"], arch, RngState(0))
        params = model.parameters()
        if [p["name"] for p in header["params"]] != [n for n, _ in params]:
            raise CheckpointError("checkpoint params do not match the declared architecture")
        offset = 12 + hlen
        for spec, (name, tensor) in zip(header["params"], params):
            shape = tuple(spec["shape"])
            if shape != tensor.shape:
                raise CheckpointError(f"checkpoint params: {name} has shape {shape}, expected {tensor.shape}")
            nbytes = int(np.prod(shape)) * 8
            if offset + nbytes > len(raw):
                raise CheckpointError(f"truncated checkpoint: payload for {name} incomplete")
            tensor.data = np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)),
                                        offset=offset).reshape(shape).astype(np.float64)
            offset += nbytes
        if offset != len(raw):
            raise CheckpointError(f"checkpoint has {len(raw) - offset} trailing bytes")
        return model


# ---------------------------------------------------------------------------
# builders


def build_cnn(input_shape: tuple[int, int, int], n_classes: int,
              arch: CnnArch = CnnArch(), rng: RngState = RngState(0)) -> Model:
    """Conv/relu/pool blocks, then flatten, a hidden dense layer and the class head.

    ``input_shape`` is (C, H, W); parameters are initialized deterministically
    from ``rng`` with fan-scaled uniform draws.
    """
    if n_classes < 2:
        raise ConfigError(f"need >= 2 classes, got {n_classes}")
    gen = rng.generator()
    layers: list[tuple[str, object]] = []
    c, h, w = input_shape
    shape = (c, h, w)
    relu_count = 0
    for i, out_ch in enumerate(arch.conv_channels, start=1):
        conv = Conv2d(shape[0], out_ch, arch.kernel_size, padding=arch.padding, gen=gen)
        shape = conv.output_shape(shape)
        layers.append((f"conv{i}", conv))
        relu_count += 1
        layers.append((f"relu{relu_count}", ReLU()))
        pool = MaxPool2()
        shape = pool.output_shape(shape)
        layers.append((f"pool{i}", pool))
    layers.append(("flatten1", Flatten()))
    width = int(np.prod(shape))
    if arch.dense_width:
        layers.append(("dense1", Dense(width, arch.dense_width, gen=gen)))
        relu_count += 1
        layers.append((f"relu{relu_count}", ReLU()))
        width = arch.dense_width
        layers.append(("dense2", Dense(width, n_classes, gen=gen)))
    else:
        layers.append(("dense1", Dense(width, n_classes, gen=gen)))
    return Model(layers, input_shape, n_classes, arch)


def build_mlp(input_shape: tuple[int, int, int], n_classes: int,
              arch: MlpArch = MlpArch(), rng: RngState = RngState(0)) -> Model:
    """Flattened-pixel dense/relu stack used as the comparison baseline."""
    if n_classes < 2:
        raise ConfigError(f"need >= 2 classes, got {n_classes}")
    gen = rng.generator()
    layers: list[tuple[str, object]] = [("flatten1", Flatten())]
    width = int(np.prod(input_shape))
    for i, hidden in enumerate(arch.hidden, start=1):
        layers.append((f"dense{i}", Dense(width, hidden, gen=gen)))
        layers.append((f"relu{i}", ReLU()))
        width = hidden
    layers.append((f"dense{len(arch.hidden) + 1}", Dense(width, n_classes, gen=gen)))
    return Model(layers, input_shape, n_classes, arch)


# ---------------------------------------------------------------------------
# supervised training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.05
    rng: RngState = field(default_factory=lambda: RngState(0))

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.learning_rate}")

    def with_rng(self, rng: RngState) -> "TrainConfig":
        return replace(self, rng=rng)


def train_supervised(model: Model, images: np.ndarray, labels: np.ndarray,
                     config: TrainConfig) -> list[float]:
    """Shuffled mini-batch SGD on softmax cross-entropy, in place on ``model``.

    Returns the per-epoch mean losses (sample-weighted, so the trace does not
    depend on how a permutation slices into batches).
    """
    images = model._check_images(images)
    labels = np.asarray(labels, dtype=np.int64)
    n = images.shape[0]
    if n == 0:
        raise ValidationError("training set is empty")
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ValidationError(
            f"labels must lie in [0, {model.n_classes}), got range [{labels.min()}, {labels.max()}]"
        )
    if config.batch_size > n:
        raise ConfigError(f"batch size {config.batch_size} exceeds training-set size {n}")
    gen = config.rng.generator()
    trace: list[float] = []
    for epoch in range(config.epochs):
        order = gen.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            logits, caches = model.forward_with_caches(images[idx])
            try:
                loss, probs = ops.softmax_crossentropy(logits, labels[idx])
            except NumericsError as exc:
                raise NumericsError(
                    f"epoch {epoch}, batch {start // config.batch_size}: {exc}"
                ) from exc
            model.backward_from_logits(ops.softmax_crossentropy_backward(probs, labels[idx]), caches)
            ops.sgd_step(model.parameters(), config.learning_rate)
            total += loss * len(idx)
        trace.append(total / n)
    return trace
