"""Network configurations A-I, the runtime network, ensembles, model files.

The nine configurations share a ladder of paired convolutions (32, 64, 128
filters, plus a 256 pair in one variant) with optional pooling and dropout,
closed by one to three fully-connected layers. Hidden FC widths are derived
as one fourth of the preceding flattened width.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .nn import ChannelScale, Conv1D, Dense, Dropout, Flatten, Layer, \
    MaxPool1D, ReLU, softmax
from .pipeline import CHANNELS, Dataset

N_CLASSES = 5

# Layer descriptors: ("conv", filters) | ("pool",) | ("dropout", p)
#                  | ("flatten",) | ("dense", width)
LayerDesc = tuple


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    m: int
    in_channels: int
    layers: tuple[LayerDesc, ...]

    def to_jsonable(self) -> dict:
        descs = []
        for d in self.layers:
            kind = d[0]
            if kind == "conv":
                descs.append({"kind": "conv", "filters": d[1]})
            elif kind == "dropout":
                descs.append({"kind": "dropout", "p": d[1]})
            elif kind == "dense":
                descs.append({"kind": "dense", "units": d[1]})
            else:
                descs.append({"kind": kind})
        return {"name": self.name, "input_len": self.m,
                "in_channels": self.in_channels, "layers": descs}


# per column: (conv groups with pooling flag, dropout-after-pool group ids,
# extra 256 pair, hidden FC count, dropout after hidden FCs)
_RECIPES: dict[str, tuple[int, bool, tuple[int, ...], bool, int, bool]] = {
    "A": (1, False, (), False, 0, False),
    "B": (2, False, (), False, 0, False),
    "C": (3, False, (), False, 0, False),
    "D": (3, False, (), False, 1, False),
    "E": (3, True, (), False, 1, False),
    "F": (3, True, (1, 2, 3), False, 1, True),
    "G": (3, True, (3,), False, 1, True),
    "H": (3, True, (3,), True, 1, True),
    "I": (3, True, (3,), False, 2, True),
}

_GROUP_FILTERS = (32, 64, 128)


def config_names() -> list[str]:
    return sorted(_RECIPES)


def shape_after(layers: Iterable[LayerDesc], m: int,
                in_channels: int = CHANNELS,
                pool_stride: int = 2) -> tuple[int, ...]:
    """Propagate (channels, length) symbolically through descriptors."""
    shape: tuple[int, ...] = (in_channels, m)
    for d in layers:
        kind = d[0]
        if kind == "conv":
            if len(shape) != 2:
                raise ModelError("conv after flatten")
            shape = (d[1], shape[1])
        elif kind == "pool":
            shape = (shape[0], (shape[1] - 2) // pool_stride + 1)
        elif kind == "flatten":
            shape = (shape[0] * shape[1],)
        elif kind == "dense":
            if len(shape) != 1:
                raise ModelError("dense before flatten")
            shape = (d[1],)
        elif kind == "dropout":
            pass
        else:
            raise ModelError(f"unknown layer kind {kind!r}")
    return shape


def build_config(name: str, M: int = 200,
                 dropout: Union[float, Sequence[float]] = 0.5,
                 filters: Sequence[int] = _GROUP_FILTERS,
                 pool_stride: int = 2) -> NetworkSpec:
    """Resolve one configuration column into a concrete layer list.

    dropout may be a single probability for every dropout layer or a
    sequence with one value per dropout layer in order. Filter counts are
    overridable to build scaled-down variants of the same pattern.
    """
    name = name.upper()
    if name not in _RECIPES:
        raise ModelError(
            f"unknown configuration {name!r}; valid: {', '.join(config_names())}")
    n_groups, pooled, drop_groups, tail256, n_hidden, fc_drop = _RECIPES[name]

    n_drops = len(drop_groups) + (n_hidden if fc_drop else 0)
    if isinstance(dropout, (int, float)):
        ps = [float(dropout)] * n_drops
    else:
        ps = [float(p) for p in dropout]
        if len(ps) != n_drops:
            raise ModelError(f"config {name} has {n_drops} dropout layers, "
                             f"got {len(ps)} probabilities")
    ps_iter = iter(ps)

    layers: list[LayerDesc] = []
    for gi in range(n_groups):
        w = filters[gi]
        layers += [("conv", w), ("conv", w)]
        if pooled:
            layers.append(("pool",))
        if (gi + 1) in drop_groups:
            layers.append(("dropout", next(ps_iter)))
    if tail256:
        w = filters[-1] * 2
        layers += [("conv", w), ("conv", w)]
    layers.append(("flatten",))
    for _ in range(n_hidden):
        flat = shape_after(layers, M, pool_stride=pool_stride)[0]
        layers.append(("dense", flat // 4))
        if fc_drop:
            layers.append(("dropout", next(ps_iter)))
    layers.append(("dense", N_CLASSES))

    spec = NetworkSpec(name, M, CHANNELS, tuple(layers))
    out = shape_after(spec.layers, M, CHANNELS, pool_stride)
    if out != (N_CLASSES,):
        raise ModelError(f"config {name} resolves to output shape {out}")
    return spec


class Network:
    """A realized configuration: parameterized layers plus forward/backward."""

    def __init__(self, spec: NetworkSpec, layers: list[Layer],
                 input_scale: ChannelScale | None = None):
        self.spec = spec
        self.layers = layers
        self.input_scale = input_scale

    def set_input_scale(self, mu: np.ndarray, sd: np.ndarray) -> None:
        """Fix per-channel input standardization (training-set statistics)."""
        self.input_scale = ChannelScale(mu, sd)

    @classmethod
    def build(cls, spec: NetworkSpec, seed: int | np.random.SeedSequence = 0,
              pool_stride: int = 2) -> "Network":
        ss = seed if isinstance(seed, np.random.SeedSequence) \
            else np.random.SeedSequence(seed)
        rng = np.random.Generator(np.random.PCG64(ss.spawn(1)[0]))
        drop_ss = ss.spawn(1)[0]
        layers: list[Layer] = []
        shape = (spec.in_channels, spec.m)
        counts: dict[str, int] = {}

        def tag(kind):
            counts[kind] = counts.get(kind, 0) + 1
            return f"{kind}{counts[kind]}"

        n_dense = sum(1 for d in spec.layers if d[0] == "dense")
        dense_seen = 0
        for d in spec.layers:
            kind = d[0]
            if kind == "conv":
                layers.append(Conv1D(shape[0], d[1], rng, name=tag("conv")))
                layers.append(ReLU())
                shape = (d[1], shape[1])
            elif kind == "pool":
                layers.append(MaxPool1D(2, pool_stride, name=tag("pool")))
                shape = (shape[0], (shape[1] - 2) // pool_stride + 1)
            elif kind == "dropout":
                gen = np.random.Generator(np.random.PCG64(drop_ss.spawn(1)[0]))
                layers.append(Dropout(d[1], gen, name=tag("dropout")))
            elif kind == "flatten":
                layers.append(Flatten())
                shape = (shape[0] * shape[1],)
            elif kind == "dense":
                dense_seen += 1
                layers.append(Dense(shape[0], d[1], rng, name=tag("dense")))
                if dense_seen < n_dense:
                    layers.append(ReLU())
                shape = (d[1],)
        return cls(spec, layers)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 3 or x.shape[1] != self.spec.in_channels \
                or x.shape[2] != self.spec.m:
            raise ModelError(f"expected input (B, {self.spec.in_channels}, "
                             f"{self.spec.m}), got {x.shape}")
        out = np.asarray(x, dtype=np.float64)
        if self.input_scale is not None:
            out = self.input_scale.forward(out, train)
        for layer in self.layers:
            out = layer.forward(out, train)
        return out

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        grad = dlogits
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        if self.input_scale is not None:
            grad = self.input_scale.backward(grad)
        return grad

    def predict_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        outs = [softmax(self.forward(x[i:i + batch_size]))
                for i in range(0, len(x), batch_size)]
        return np.concatenate(outs)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self.predict_proba(x, batch_size).argmax(axis=1)

    def named_params(self) -> tuple[list[str], list[np.ndarray], list[np.ndarray]]:
        names, params, grads = [], [], []
        for layer in self.layers:
            for suffix, p, g in zip("wb", layer.params, layer.grads):
                names.append(f"{layer.name}/{suffix}")
                params.append(p)
                grads.append(g)
        return names, params, grads

    def num_params(self) -> int:
        return sum(p.size for p in self.named_params()[1])

    def get_weights(self) -> list[np.ndarray]:
        return [p.copy() for p in self.named_params()[1]]

    def set_weights(self, weights: list[np.ndarray]) -> None:
        params = self.named_params()[1]
        if len(weights) != len(params):
            raise ModelError("weight list does not match network")
        for p, w in zip(params, weights):
            p[...] = w


def forward_full(net: Network, batch: np.ndarray, train: bool = False) -> np.ndarray:
    """Class probabilities for a batch; rows sum to 1."""
    return softmax(net.forward(batch, train))


def num_params_closed_form(spec: NetworkSpec) -> int:
    """Parameter count from the descriptor list alone."""
    total = 0
    shape = (spec.in_channels, spec.m)
    for d in spec.layers:
        if d[0] == "conv":
            total += d[1] * shape[0] * 3 + d[1]
            shape = (d[1], shape[1])
        elif d[0] == "pool":
            shape = (shape[0], (shape[1] - 2) // 2 + 1)
        elif d[0] == "flatten":
            shape = (shape[0] * shape[1],)
        elif d[0] == "dense":
            total += d[1] * shape[0] + d[1]
            shape = (d[1],)
    return total


# --- bootstrap ensemble -----------------------------------------------------

@dataclass(frozen=True)
class EnsembleSpec:
    base: NetworkSpec
    n_members: int = 7
    seeds: tuple[int, ...] = ()

    def __post_init__(self):
        if self.n_members < 1:
            raise ModelError("ensemble needs at least one member")


def member_seeds(master_seed: int, n_members: int) -> list[np.random.SeedSequence]:
    """Fixed splitting rule: one child sequence per member, in member order."""
    return np.random.SeedSequence(master_seed).spawn(n_members)


def bootstrap_resample(dataset: Dataset, seed: int | np.random.SeedSequence) -> Dataset:
    """Draw len(dataset) samples with replacement."""
    n = len(dataset.samples)
    if n < 1:
        raise ModelError("cannot resample an empty dataset")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=n)
    return Dataset([dataset.samples[i] for i in idx], dataset.M,
                   dataset.provenance + "/bootstrap")


class Ensemble:
    """Bagged networks; prediction averages the members' probabilities."""

    def __init__(self, members: list[Network]):
        if not members:
            raise ModelError("empty ensemble")
        first = members[0].spec
        for m in members[1:]:
            if m.spec.layers != first.layers or m.spec.m != first.m:
                raise ModelError("ensemble members have differing layer specs")
        self.members = members

    def predict_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        probs = self.members[0].predict_proba(x, batch_size)
        for m in self.members[1:]:
            probs += m.predict_proba(x, batch_size)
        return probs / len(self.members)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self.predict_proba(x, batch_size).argmax(axis=1)


# --- TMMD model file format --------------------------------------------------
#
# magic "TMMD", u32 version=1, u32 n_layers, then one record per layer:
#   u8 kind, shape u32s, little-endian f32 parameters
# kinds: 0 input(u32 name_char, u32 channels, u32 m)   -- geometry pseudo-layer
#        1 conv(u32 D, u32 C, u32 K; D*C*K f32 weights, D f32 bias)
#        2 relu
#        3 pool(u32 width, u32 stride)
#        4 dropout(f32 p)
#        5 flatten
#        6 dense(u32 out, u32 in; out*in f32 weights, out f32 bias)
#        7 scale(u32 C; C f32 means, C f32 spreads)    -- input standardization
# trailing u32: CRC-32 of everything after the 8-byte magic+version header.

TMMD_MAGIC = b"TMMD"
TMMD_VERSION = 1


def save_network(net: Network, path: str) -> None:
    payload = bytearray()
    records = [("input", net.spec)]
    if net.input_scale is not None:
        records.append((None, net.input_scale))
    records += [(None, layer) for layer in net.layers]
    payload += struct.pack("<I", len(records))
    for kind, obj in records:
        if kind == "input":
            name_char = ord(obj.name[0]) if obj.name else 0
            payload += struct.pack("<BIII", 0, name_char, obj.in_channels, obj.m)
        elif isinstance(obj, ChannelScale):
            c = obj.mu.size
            payload += struct.pack("<BI", 7, c)
            payload += obj.mu.ravel().astype("<f4").tobytes()
            payload += obj.sd.ravel().astype("<f4").tobytes()
        elif isinstance(obj, Conv1D):
            payload += struct.pack("<BIII", 1, obj.out_channels,
                                   obj.in_channels, obj.width)
            payload += obj.w.astype("<f4").tobytes()
            payload += obj.b.astype("<f4").tobytes()
        elif isinstance(obj, ReLU):
            payload += struct.pack("<B", 2)
        elif isinstance(obj, MaxPool1D):
            payload += struct.pack("<BII", 3, obj.width, obj.stride)
        elif isinstance(obj, Dropout):
            payload += struct.pack("<Bf", 4, obj.p)
        elif isinstance(obj, Flatten):
            payload += struct.pack("<B", 5)
        elif isinstance(obj, Dense):
            payload += struct.pack("<BII", 6, obj.n_out, obj.n_in)
            payload += obj.w.astype("<f4").tobytes()
            payload += obj.b.astype("<f4").tobytes()
        else:
            raise ModelError(f"cannot serialize layer {obj!r}")
    with open(path, "wb") as f:
        f.write(TMMD_MAGIC)
        f.write(struct.pack("<I", TMMD_VERSION))
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def load_network(path: str) -> Network:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != TMMD_MAGIC:
        raise ModelError(f"{path}: bad magic {raw[:4]!r}, expected TMMD")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != TMMD_VERSION:
        raise ModelError(f"{path}: unsupported TMMD version {version}")
    payload, (crc,) = raw[8:-4], struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(payload) != crc:
        raise ModelError(f"{path}: CRC mismatch, file corrupted")

    off = 0

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, payload, off)
        off += struct.calcsize(fmt)
        return vals

    def take_f32(count):
        nonlocal off
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        off += count * 4
        return arr.astype(np.float64)

    (n_records,) = take("<I")
    name, channels, m = "?", CHANNELS, 0
    input_scale = None
    layers: list[Layer] = []
    descs: list[LayerDesc] = []
    rng = np.random.default_rng(0)  # placeholder init, overwritten below
    counts: dict[str, int] = {}

    def tag(kind):
        counts[kind] = counts.get(kind, 0) + 1
        return f"{kind}{counts[kind]}"

    for _ in range(n_records):
        (kind,) = take("<B")
        if kind == 0:
            name_char, channels, m = take("<III")
            name = chr(name_char) if name_char else "?"
        elif kind == 1:
            d, c, k = take("<III")
            layer = Conv1D(c, d, rng, width=k, name=tag("conv"))
            layer.w = take_f32(d * c * k).reshape(d, c, k)
            layer.b = take_f32(d)
            layers.append(layer)
            descs.append(("conv", d))
        elif kind == 2:
            layers.append(ReLU())
        elif kind == 3:
            w, s = take("<II")
            layers.append(MaxPool1D(w, s, name=tag("pool")))
            descs.append(("pool",))
        elif kind == 4:
            (p,) = take("<f")
            layers.append(Dropout(float(p), np.random.default_rng(0),
                                  name=tag("dropout")))
            descs.append(("dropout", float(p)))
        elif kind == 5:
            layers.append(Flatten())
            descs.append(("flatten",))
        elif kind == 6:
            n_out, n_in = take("<II")
            layer = Dense(n_in, n_out, rng, name=tag("dense"))
            layer.w = take_f32(n_out * n_in).reshape(n_out, n_in)
            layer.b = take_f32(n_out)
            layers.append(layer)
            descs.append(("dense", n_out))
        elif kind == 7:
            (c,) = take("<I")
            input_scale = ChannelScale(take_f32(c), take_f32(c))
        else:
            raise ModelError(f"{path}: unknown layer kind {kind}")
    spec = NetworkSpec(name, m, channels, tuple(descs))
    return Network(spec, layers, input_scale)
