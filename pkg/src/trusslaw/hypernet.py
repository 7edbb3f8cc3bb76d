"""Hypernetwork mapping a truss encoding to the weights of its strain-energy
network: a shared trunk feeding one head for the positivity-constrained
weights and one head for the passthrough weights."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .design import N_FEATURES, N_NODES, OctantGraph, encode
from .icnn import ConstitutiveModel, IcnnShape, IcnnWeights

LEAKY_SLOPE = 0.01
N_ADJ = N_NODES * (N_NODES + 1) // 2


def leaky_relu(x, xp=np):
    return xp.where(x >= 0, x, LEAKY_SLOPE * x)


@dataclass(frozen=True)
class HypernetArch:
    n_in: int = N_FEATURES
    trunk: tuple = (256, 256, 256, 256, 256)
    head_hidden: tuple = (256, 256, 256, 256)
    icnn_hidden: tuple = (20, 20, 20)
    alpha: float = 0.1
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "trunk", tuple(int(v) for v in self.trunk))
        object.__setattr__(self, "head_hidden", tuple(int(v) for v in self.head_hidden))
        object.__setattr__(self, "icnn_hidden", tuple(int(v) for v in self.icnn_hidden))

    @property
    def icnn(self) -> IcnnShape:
        return IcnnShape(self.icnn_hidden)

    def layer_shapes(self) -> dict:
        """(fan_in, fan_out) of every affine layer, per block."""
        def chain(widths):
            return [(a, b) for a, b in zip(widths[:-1], widths[1:])]

        top = self.trunk[-1]
        return {
            "trunk": chain((self.n_in,) + self.trunk),
            "fc": chain((top,) + self.head_hidden + (self.icnn.n_fc,)),
            "pt": chain((top,) + self.head_hidden + (self.icnn.n_pt,)),
        }

    @property
    def n_params(self) -> int:
        return sum(a * b + b for layers in self.layer_shapes().values() for a, b in layers)

    def shape_hash(self) -> bytes:
        text = json.dumps(self.layer_shapes(), sort_keys=True)
        return hashlib.sha256(text.encode()).digest()[:8]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "HypernetArch":
        return cls(**json.loads(text))


# --------------------------------------------------------------------------
# weight layout of the two head outputs


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple
    start: int

    @property
    def stop(self) -> int:
        return self.start + int(np.prod(self.shape))


@dataclass(frozen=True)
class WeightLayout:
    fc: tuple
    pt: tuple

    @classmethod
    def for_shape(cls, shape: IcnnShape) -> "WeightLayout":
        def table(segments):
            out, k = [], 0
            for name, shp in segments:
                out.append(Segment(name, tuple(shp), k))
                k += int(np.prod(shp))
            return tuple(out)

        return cls(table(shape.fc_segments), table(shape.pt_segments))

    @property
    def n_fc(self) -> int:
        return self.fc[-1].stop

    @property
    def n_pt(self) -> int:
        return self.pt[-1].stop


class LayoutError(ValueError):
    pass


def pack(fc_vec, pt_vec, shared_biases, alpha: float = 1.0, beta: float = 1.0,
         shape: IcnnShape = IcnnShape()) -> IcnnWeights:
    layout = WeightLayout.for_shape(shape)
    fc_vec, pt_vec = np.asarray(fc_vec, float), np.asarray(pt_vec, float)
    b = np.asarray(shared_biases, float)
    if fc_vec.shape != (layout.n_fc,) or pt_vec.shape != (layout.n_pt,) or b.shape != (shape.n_bias,):
        raise LayoutError(
            f"expected lengths {layout.n_fc}/{layout.n_pt}/{shape.n_bias}, "
            f"got {fc_vec.size}/{pt_vec.size}/{b.size}"
        )
    parts = {s.name: fc_vec[s.start : s.stop].reshape(s.shape) for s in layout.fc}
    parts.update({s.name: pt_vec[s.start : s.stop].reshape(s.shape) for s in layout.pt})
    return IcnnWeights(b=b, alpha=alpha, beta=beta, **parts)


def unpack(w: IcnnWeights):
    """Inverse of pack: (fc_vec, pt_vec, shared_biases)."""
    layout = WeightLayout.for_shape(w.shape)
    fc = np.concatenate([np.ravel(getattr(w, s.name)) for s in layout.fc])
    pt = np.concatenate([np.ravel(getattr(w, s.name)) for s in layout.pt])
    return fc, pt, np.array(w.b)


# --------------------------------------------------------------------------
# parameters and forward pass


def unflatten(theta, arch: HypernetArch) -> dict:
    """Views of the flat parameter vector as per-block lists of (W, b).

    W has shape (fan_out, fan_in). Works for numpy and jax arrays alike.
    """
    out, k = {}, 0
    for block, layers in arch.layer_shapes().items():
        params = []
        for a, b in layers:
            W = theta[k : k + a * b].reshape(b, a)
            k += a * b
            bias = theta[k : k + b]
            k += b
            params.append((W, bias))
        out[block] = params
    return out


def _positive_weight_offsets(arch: HypernetArch) -> np.ndarray:
    """Raw values whose beta*softplus equals 1/fan_in for every constrained
    weight, zero elsewhere; keeps the initial energy network well scaled."""
    out = np.zeros(arch.icnn.n_fc)
    for seg in WeightLayout.for_shape(arch.icnn).fc:
        if seg.name == "A1":
            continue
        target = 1.0 / (arch.beta * seg.shape[-1])
        out[seg.start : seg.stop] = np.log(np.expm1(target))
    return out


def init_params(arch: HypernetArch, rng: np.random.Generator, output_scale: float = 1e-2) -> np.ndarray:
    """Fan-in uniform init; head output layers scaled down, and the
    fully-connected head output biased so the emitted positive weights
    start near 1/fan_in."""
    chunks = []
    for block, layers in arch.layer_shapes().items():
        for i, (a, b) in enumerate(layers):
            bound = 1.0 / np.sqrt(a)
            last = block != "trunk" and i == len(layers) - 1
            scale = output_scale if last else 1.0
            chunks.append(scale * rng.uniform(-bound, bound, size=a * b))
            bias = scale * rng.uniform(-bound, bound, size=b)
            if last and block == "fc":
                bias += _positive_weight_offsets(arch)
            chunks.append(bias)
    return np.concatenate(chunks)


def normalize_features(features, xp=np):
    """Adjacency bits as-is, in-plane coordinates mapped to [-1, 1]."""
    return xp.concatenate([features[..., :N_ADJ], 2.0 * features[..., N_ADJ:] - 1.0], axis=-1)


def forward(theta, features, arch: HypernetArch, xp=np):
    """(fc_vec, pt_vec) for one feature vector or a batch of them."""
    p = unflatten(theta, arch)
    h = normalize_features(xp.asarray(features), xp)
    for W, b in p["trunk"]:
        h = leaky_relu(h @ W.T + b, xp)
    outs = []
    for block in ("fc", "pt"):
        g = h
        layers = p[block]
        for W, b in layers[:-1]:
            g = leaky_relu(g @ W.T + b, xp)
        W, b = layers[-1]
        outs.append(g @ W.T + b)
    return outs[0], outs[1]


@dataclass
class Hypernetwork:
    """Trained parameters plus everything needed to emit constitutive models."""

    arch: HypernetArch
    theta: np.ndarray
    biases: np.ndarray
    scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.theta.shape != (self.arch.n_params,):
            raise LayoutError(f"parameter vector has {self.theta.size} entries, arch needs {self.arch.n_params}")
        if self.biases.shape != (self.arch.icnn.n_bias,):
            raise LayoutError(f"expected {self.arch.icnn.n_bias} shared biases")

    @classmethod
    def initialize(cls, arch: HypernetArch, rng: np.random.Generator, scale: float = 1.0):
        return cls(arch, init_params(arch, rng), np.zeros(arch.icnn.n_bias), scale)

    def forward(self, features):
        return forward(self.theta, np.asarray(features, float), self.arch)

    def icnn_weights(self, graph: OctantGraph) -> IcnnWeights:
        fc, pt = self.forward(encode(graph))
        return pack(fc, pt, self.biases, self.arch.alpha, self.arch.beta, self.arch.icnn)

    def predict_model(self, graph: OctantGraph) -> ConstitutiveModel:
        return ConstitutiveModel(self.icnn_weights(graph), self.scale)


def predict_model(hn: Hypernetwork, graph: OctantGraph) -> ConstitutiveModel:
    return hn.predict_model(graph)


# --------------------------------------------------------------------------
# checkpoint

CKPT_MAGIC = b"HCNN"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sH8sdddI")


class CheckpointError(IOError):
    pass


def save_checkpoint(path, hn: Hypernetwork) -> None:
    arch_json = hn.arch.to_json().encode()
    head = _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, hn.arch.shape_hash(), hn.arch.alpha,
                           hn.arch.beta, hn.scale, len(arch_json))
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(head)
        fh.write(arch_json)
        fh.write(hn.theta.astype("<f8").tobytes())
        fh.write(hn.biases.astype("<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path, expect: HypernetArch | None = None) -> Hypernetwork:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEAD.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, shash, alpha, beta, scale, n_json = _CKPT_HEAD.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    k = _CKPT_HEAD.size
    arch = HypernetArch.from_json(data[k : k + n_json].decode())
    k += n_json
    if arch.shape_hash() != shash or (alpha, beta) != (arch.alpha, arch.beta):
        raise CheckpointError(f"{path}: header does not match the stored architecture")
    if expect is not None and expect.shape_hash() != shash:
        raise CheckpointError(f"{path}: layer shapes differ from the expected architecture")
    body = np.frombuffer(data[k:], dtype="<f8")
    if body.size != arch.n_params + arch.icnn.n_bias:
        raise CheckpointError(f"{path}: parameter count {body.size} does not match the architecture")
    return Hypernetwork(arch, body[: arch.n_params].copy(), body[arch.n_params :].copy(), scale)
