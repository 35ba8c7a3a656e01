"""Encoder + prototype model with explicit forward caches and backprop.

The model is a small MLP feature extractor followed by a dot-product
head against K prototype vectors. Gradients are computed by hand on
float64 arrays; a version counter on the model catches the classic bug
of backpropagating through a cache recorded before a parameter update.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .numkit import as_matrix, derive_rng, softmax

MAGIC = b"PCDM"
FORMAT_VERSION = 1

_ACTIVATIONS = ("relu", "tanh")
_ENCODER_KINDS = ("mlp", "identity")


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden_dims: tuple = (64,)
    feature_dim: int = 16
    activation: str = "relu"

    def validate(self):
        if self.input_dim < 1 or self.feature_dim < 1:
            raise ValueError("input_dim and feature_dim must be >= 1")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden_dims must be positive, got {self.hidden_dims}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def layer_dims(self):
        return (self.input_dim,) + tuple(self.hidden_dims) + (self.feature_dim,)


@dataclass
class ClusterModel:
    spec: EncoderSpec
    encoder_kind: str            # "mlp" or "identity"
    weights: list                # per layer, shape (fan_in, fan_out)
    biases: list                 # per layer, shape (fan_out,)
    prototypes: np.ndarray       # (k, feature_dim)
    temperature: float = 1.0
    version: int = 0

    @property
    def k(self):
        return self.prototypes.shape[0]

    def bump_version(self):
        self.version += 1

    def parameter_list(self):
        """Arrays in the fixed order the optimizer and Gradients use."""
        return list(self.weights) + list(self.biases) + [self.prototypes]


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre_activations: list
    activations: list            # activations[-1] is the feature batch
    version: int

    @property
    def features(self):
        return self.activations[-1]


@dataclass
class Gradients:
    weights: list
    biases: list
    prototypes: np.ndarray

    def flat(self):
        return list(self.weights) + list(self.biases) + [self.prototypes]

    def add(self, other, coeff=1.0):
        for mine, theirs in zip(self.flat(), other.flat()):
            mine += coeff * theirs
        return self

    def scale(self, coeff):
        for arr in self.flat():
            arr *= coeff
        return self


def zero_gradients(model):
    return Gradients(
        weights=[np.zeros_like(w) for w in model.weights],
        biases=[np.zeros_like(b) for b in model.biases],
        prototypes=np.zeros_like(model.prototypes),
    )


def init_model(spec, k, seed, encoder_kind="mlp", temperature=1.0, rng_tag="model"):
    """Build a model with fan-in scaled uniform weights and zero biases."""
    spec.validate()
    if k < 2:
        raise ValueError(f"need at least 2 prototypes, got {k}")
    if encoder_kind not in _ENCODER_KINDS:
        raise ValueError(f"unknown encoder kind {encoder_kind!r}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if encoder_kind == "identity" and spec.input_dim != spec.feature_dim:
        raise ValueError("identity encoder requires input_dim == feature_dim")

    rng = derive_rng(seed, rng_tag)
    weights, biases = [], []
    if encoder_kind == "mlp":
        dims = spec.layer_dims()
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
    proto_bound = 1.0 / np.sqrt(spec.feature_dim)
    prototypes = rng.uniform(-proto_bound, proto_bound, size=(k, spec.feature_dim))
    return ClusterModel(
        spec=spec,
        encoder_kind=encoder_kind,
        weights=weights,
        biases=biases,
        prototypes=prototypes,
        temperature=float(temperature),
    )


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(pre, act, kind):
    if kind == "relu":
        return (pre > 0).astype(np.float64)
    return 1.0 - act * act


def encode(model, x):
    """Forward pass; returns (features, cache) for a later backward call."""
    x = as_matrix(x, "encoder input")
    if x.shape[1] != model.spec.input_dim:
        raise ValueError(
            f"input width {x.shape[1]} != expected {model.spec.input_dim}"
        )
    if model.encoder_kind == "identity":
        cache = ForwardCache(x, [], [x], model.version)
        return x, cache

    pre, act = [], []
    a = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        pre.append(z)
        # the output layer stays linear so features span all of R^d
        a = z if i == last else _activate(z, model.spec.activation)
        act.append(a)
    cache = ForwardCache(x, pre, act, model.version)
    return a, cache


def head_logits(model, features):
    features = as_matrix(features, "features")
    if features.shape[1] != model.prototypes.shape[1]:
        raise ValueError("feature width does not match prototypes")
    return features @ model.prototypes.T


def predict_from_features(model, features):
    """Class probabilities softmax(head_logits / temperature)."""
    return softmax(head_logits(model, features), temperature=model.temperature)


def predict(model, x):
    """Class probabilities for raw inputs."""
    features, _ = encode(model, x)
    return predict_from_features(model, features)


def backward(model, cache, d_features, d_prototypes=None):
    """Map feature-space gradients to parameter gradients.

    Raises if the cache was recorded under an older parameter version.
    """
    if cache.version != model.version:
        raise ValueError(
            f"stale forward cache: recorded at version {cache.version}, "
            f"model is at {model.version}"
        )
    d_features = as_matrix(d_features, "d_features")
    if d_features.shape != cache.features.shape:
        raise ValueError("d_features shape does not match cached features")
    if d_prototypes is None:
        d_prototypes = np.zeros_like(model.prototypes)

    if model.encoder_kind == "identity":
        return Gradients([], [], np.array(d_prototypes, dtype=np.float64))

    d_w = [None] * len(model.weights)
    d_b = [None] * len(model.biases)
    delta = d_features
    last = len(model.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            delta = delta * _activate_grad(
                cache.pre_activations[i], cache.activations[i], model.spec.activation
            )
        below = cache.inputs if i == 0 else cache.activations[i - 1]
        d_w[i] = below.T @ delta
        d_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ model.weights[i].T
    return Gradients(d_w, d_b, np.array(d_prototypes, dtype=np.float64))


def head_backward(model, cache, d_scaled_logits):
    """Parameter gradients for a loss differentiated at softmax inputs.

    The softmax input is head_logits / temperature, so the chain rule
    picks up a 1/temperature factor on the way to features and
    prototypes.
    """
    d_scaled = as_matrix(d_scaled_logits, "d_scaled_logits")
    feats = cache.features
    if d_scaled.shape != (feats.shape[0], model.k):
        raise ValueError("d_scaled_logits shape does not match cached batch")
    d_feats = d_scaled @ model.prototypes / model.temperature
    d_protos = d_scaled.T @ feats / model.temperature
    return backward(model, cache, d_feats, d_protos)


# ---------------------------------------------------------------------------
# checkpoint serialization


def _pack_tensor(arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.off = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.blob):
            raise ValueError(
                f"truncated checkpoint: need {size} bytes at offset {self.off}, "
                f"have {len(self.blob) - self.off}"
            )
        vals = struct.unpack_from(fmt, self.blob, self.off)
        self.off += size
        return vals

    def take_tensor(self):
        (ndim,) = self.take("<I")
        if ndim > 8:
            raise ValueError(f"implausible tensor rank {ndim} at offset {self.off}")
        shape = self.take(f"<{ndim}I")
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        size = count * 8
        if self.off + size > len(self.blob):
            raise ValueError(
                f"truncated tensor data at offset {self.off}: need {size} bytes"
            )
        arr = np.frombuffer(self.blob, dtype="<f8", count=count, offset=self.off)
        self.off += size
        return arr.reshape(shape).astype(np.float64)


def save_model(model, path):
    """Serialize to the PCDM container. Round-trips bitwise."""
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(struct.pack("<I", _ENCODER_KINDS.index(model.encoder_kind)))
    spec = model.spec
    parts.append(struct.pack("<II", spec.input_dim, len(spec.hidden_dims)))
    if spec.hidden_dims:
        parts.append(struct.pack(f"<{len(spec.hidden_dims)}I", *spec.hidden_dims))
    parts.append(struct.pack("<II", spec.feature_dim, _ACTIVATIONS.index(spec.activation)))
    parts.append(struct.pack("<I", model.k))
    parts.append(struct.pack("<d", model.temperature))
    parts.append(struct.pack("<I", len(model.weights)))
    for w, b in zip(model.weights, model.biases):
        parts.append(_pack_tensor(w))
        parts.append(_pack_tensor(b))
    parts.append(_pack_tensor(model.prototypes))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_model(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    r = _Reader(blob)
    r.off = 4
    (fmt_version,) = r.take("<I")
    if fmt_version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {fmt_version}")
    (kind_idx,) = r.take("<I")
    if kind_idx >= len(_ENCODER_KINDS):
        raise ValueError(f"unknown encoder kind id {kind_idx}")
    input_dim, n_hidden = r.take("<II")
    hidden = r.take(f"<{n_hidden}I") if n_hidden else ()
    feature_dim, act_idx = r.take("<II")
    if act_idx >= len(_ACTIVATIONS):
        raise ValueError(f"unknown activation id {act_idx}")
    (k,) = r.take("<I")
    (temperature,) = r.take("<d")
    (n_layers,) = r.take("<I")
    weights, biases = [], []
    for _ in range(n_layers):
        weights.append(r.take_tensor())
        biases.append(r.take_tensor())
    prototypes = r.take_tensor()
    if r.off != len(blob):
        raise ValueError(f"{len(blob) - r.off} trailing bytes after checkpoint")

    spec = EncoderSpec(input_dim, tuple(hidden), feature_dim, _ACTIVATIONS[act_idx])
    spec.validate()
    model = ClusterModel(
        spec=spec,
        encoder_kind=_ENCODER_KINDS[kind_idx],
        weights=weights,
        biases=biases,
        prototypes=prototypes,
        temperature=temperature,
    )
    if prototypes.shape != (k, feature_dim):
        raise ValueError("prototype tensor does not match header dimensions")
    return model
