"""Networks assembled from point convolution layers.

A feature encoding level runs density estimation, farthest point sampling,
k-NN grouping and one convolution, producing a coarser cloud with richer
channels. Segmentation networks mirror the encoders with propagation levels
that interpolate coarse features back onto the finer resolution, concatenate
skip features, and convolve again, until every input point has features.

Geometry (sampling, neighbors, densities) is recomputed per level on that
level's point subset; in eval mode it is cached on the cloud object since it
does not depend on parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from pointconv import conv as C
from pointconv import pointops as P
from pointconv import tensor as T
from pointconv.tensor import Tensor

__all__ = [
    "EncodingSpec",
    "PropagationSpec",
    "NetworkConfig",
    "PointConvNet",
    "ConfigError",
    "CheckpointError",
    "default_classify_config",
    "default_segment_config",
    "parameter_count",
    "save_params",
    "load_params",
]

MAGIC = b"PCNV"
VERSION = 1


class ConfigError(ValueError):
    """Invalid network configuration."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


@dataclass
class EncodingSpec:
    n_out: int          # centroids kept by farthest point sampling
    k: int              # neighborhood size
    c_mid: int          # WeightNet penultimate width
    c_out: int
    mlp_channels: tuple = ()  # per-point MLP widths applied before the conv


@dataclass
class PropagationSpec:
    skip_level: int     # encoder level providing skip features (0 = input)
    k: int
    c_mid: int
    c_out: int


@dataclass
class NetworkConfig:
    task: str
    input_dim: int
    input_channels: int
    num_classes: int
    encoders: list
    propagators: list = field(default_factory=list)
    head_widths: tuple = (128,)
    head_dropout: float = 0.4
    head_batch_norm: bool = True
    density_mode: str = "mlp"
    kde_bandwidth: float = 0.1
    weightnet_layers: int = 2
    weightnet_bn: bool = False
    post_activation: bool = True
    seed: int = 0

    def validate(self):
        if self.task not in ("classify", "segment"):
            raise ConfigError(f"task must be classify or segment, got {self.task!r}")
        if self.input_dim not in (2, 3):
            raise ConfigError(f"input_dim must be 2 or 3, got {self.input_dim}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.density_mode not in C.DENSITY_MODES:
            raise ConfigError(f"density_mode must be one of {C.DENSITY_MODES}")
        if not self.encoders:
            raise ConfigError("at least one encoding level is required")
        for spec in self.encoders:
            if spec.k < 1 or spec.n_out < 1:
                raise ConfigError("encoder n_out and k must be >= 1")
        if self.task == "segment":
            want = list(range(len(self.encoders) - 1, -1, -1))
            got = [p.skip_level for p in self.propagators]
            if got != want:
                raise ConfigError(
                    f"propagators must mirror encoders in reverse: skip levels {got}, expected {want}"
                )
        return self

    def to_dict(self):
        return {
            "task": self.task,
            "input_dim": self.input_dim,
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
            "encoders": [vars(e) | {"mlp_channels": list(e.mlp_channels)} for e in self.encoders],
            "propagators": [vars(p) for p in self.propagators],
            "head_widths": list(self.head_widths),
            "head_dropout": self.head_dropout,
            "head_batch_norm": self.head_batch_norm,
            "density_mode": self.density_mode,
            "kde_bandwidth": self.kde_bandwidth,
            "weightnet_layers": self.weightnet_layers,
            "weightnet_bn": self.weightnet_bn,
            "post_activation": self.post_activation,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["encoders"] = [EncodingSpec(**{**e, "mlp_channels": tuple(e.get("mlp_channels", ()))})
                         for e in d.get("encoders", [])]
        d["propagators"] = [PropagationSpec(**p) for p in d.get("propagators", [])]
        d["head_widths"] = tuple(d.get("head_widths", (128,)))
        return cls(**d).validate()


def default_classify_config(num_classes=4, input_channels=3, input_dim=3, seed=0, **overrides):
    """Desk-scale classification stack: 3 encoding levels, mean pool, FC head."""
    cfg = NetworkConfig(
        task="classify",
        input_dim=input_dim,
        input_channels=input_channels,
        num_classes=num_classes,
        encoders=[
            EncodingSpec(n_out=256, k=16, c_mid=8, c_out=64, mlp_channels=(32,)),
            EncodingSpec(n_out=64, k=16, c_mid=8, c_out=128),
            EncodingSpec(n_out=16, k=16, c_mid=8, c_out=256),
        ],
        head_widths=(128,),
        head_dropout=0.4,
        seed=seed,
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


def default_segment_config(num_classes=2, input_channels=3, input_dim=3, seed=0, **overrides):
    """Desk-scale U-shape: 3 encoding levels mirrored by 3 propagation levels."""
    cfg = NetworkConfig(
        task="segment",
        input_dim=input_dim,
        input_channels=input_channels,
        num_classes=num_classes,
        encoders=[
            EncodingSpec(n_out=256, k=16, c_mid=8, c_out=32, mlp_channels=(32,)),
            EncodingSpec(n_out=64, k=16, c_mid=8, c_out=64),
            EncodingSpec(n_out=16, k=16, c_mid=8, c_out=128),
        ],
        propagators=[
            PropagationSpec(skip_level=2, k=8, c_mid=8, c_out=128),
            PropagationSpec(skip_level=1, k=8, c_mid=8, c_out=64),
            PropagationSpec(skip_level=0, k=8, c_mid=8, c_out=64),
        ],
        head_widths=(64,),
        head_dropout=0.0,
        seed=seed,
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


class _MLPBlock:
    """Per-point linear + batch norm + ReLU stack."""

    def __init__(self, c_in, widths, rng):
        self.weights, self.biases, self.bns = [], [], []
        ch = c_in
        for w in widths:
            self.weights.append(Tensor(C.xavier_uniform(rng, ch, w), requires_grad=True))
            self.biases.append(Tensor(np.zeros(w), requires_grad=True))
            self.bns.append(T.BatchNormState(w))
            ch = w
        self.c_out = ch

    def forward(self, x, train):
        for w, b, bn in zip(self.weights, self.biases, self.bns):
            x = T.relu(T.batch_norm(T.linear(x, w, b), bn, train))
        return x

    def collect(self, prefix, params, bn_states):
        for i, (w, b, bn) in enumerate(zip(self.weights, self.biases, self.bns)):
            params[f"{prefix}l{i}.w"] = w
            params[f"{prefix}l{i}.b"] = b
            bn_states[f"{prefix}l{i}.bn"] = bn


class EncoderLevel:
    """density -> sample -> group -> convolve, producing the next level."""

    def __init__(self, spec: EncodingSpec, c_in, config, rng):
        self.spec = spec
        self.config = config
        self.pre_mlp = _MLPBlock(c_in, spec.mlp_channels, rng) if spec.mlp_channels else None
        conv_in = self.pre_mlp.c_out if self.pre_mlp else c_in
        self.conv = C.PointConvLayer(
            config.input_dim, conv_in, spec.c_mid, spec.c_out, rng,
            density_mode=config.density_mode,
            weightnet_layers=config.weightnet_layers,
            k_hint=spec.k,
            weightnet_bn=config.weightnet_bn,
        )
        self.post_bn = T.BatchNormState(spec.c_out) if config.post_activation else None
        self.c_out = spec.c_out

    def geometry(self, cloud, train, rng):
        need_density = self.config.density_mode != "disabled"
        key = ("enc", self.spec.n_out, self.spec.k, self.config.kde_bandwidth, need_density)
        if not train and key in cloud._cache:
            return cloud._cache[key]
        if self.spec.n_out > cloud.n:
            raise ConfigError(f"encoder n_out={self.spec.n_out} exceeds point count {cloud.n}")
        start = int(rng.integers(cloud.n)) if (train and rng is not None) else P.CANONICAL_START
        sub, neigh = P.level_geometry(
            cloud, self.spec.n_out, self.spec.k,
            bandwidth=self.config.kde_bandwidth if need_density else None,
            start=start,
            keep_sq=train,
        )
        if not train:
            cloud._cache[key] = (sub, neigh)
        return sub, neigh

    def forward(self, clouds, features, bases, train, rng):
        """One level over a whole batch, flattened across clouds.

        ``features`` holds all clouds' rows stacked; ``bases[i]`` is cloud
        i's row offset. Batch norm therefore normalizes over the full batch,
        keeping train and eval statistics consistent. Returns (subclouds,
        output rows, new bases, skip rows at input resolution).
        """
        skip = self.pre_mlp.forward(features, train) if self.pre_mlp else features
        subclouds, nidx, local, ginv = [], [], [], []
        new_bases = [0]
        for i, cloud in enumerate(clouds):
            sub, neigh = self.geometry(cloud, train, rng)
            subclouds.append(sub)
            nidx.append(neigh.neighbor_indices + bases[i])
            local.append(neigh.local_coords)
            ginv.append(neigh.grouped_inverse_density)
            new_bases.append(new_bases[-1] + sub.n)
        grouped = T.gather(skip, np.concatenate(nidx))
        inv = np.concatenate(ginv) if ginv[0] is not None else None
        out = C.pointconv_efficient(
            self.conv, np.concatenate(local), grouped, inv, train=train
        )
        if self.post_bn is not None:
            out = T.relu(T.batch_norm(out, self.post_bn, train))
        return subclouds, out, np.asarray(new_bases), skip

    def forward_single(self, cloud, features, train=False, rng=None):
        """Single-cloud convenience wrapper around the batched forward."""
        subclouds, out, _, skip = self.forward([cloud], features, np.array([0, cloud.n]), train, rng)
        return subclouds[0], out, skip

    def collect(self, prefix, params, bn_states):
        if self.pre_mlp:
            self.pre_mlp.collect(f"{prefix}pre.", params, bn_states)
        params.update(self.conv.named_parameters(prefix=f"{prefix}conv."))
        for name, bn in self._conv_bns(prefix):
            bn_states[name] = bn
        if self.post_bn is not None:
            bn_states[f"{prefix}post.bn"] = self.post_bn

    def _conv_bns(self, prefix):
        states = self.conv.weight_net.bn_states
        if states:
            for i, bn in enumerate(states):
                yield f"{prefix}conv.wnet.hidden{i}.bn", bn


class PropagationLevel:
    """Interpolate coarse features to a finer cloud, concat skips, convolve."""

    def __init__(self, spec: PropagationSpec, c_coarse, c_skip, config, rng):
        self.spec = spec
        self.config = config
        self.c_in = c_coarse + c_skip
        self.conv = C.PointConvLayer(
            config.input_dim, self.c_in, spec.c_mid, spec.c_out, rng,
            density_mode=config.density_mode,
            weightnet_layers=config.weightnet_layers,
            k_hint=spec.k,
            weightnet_bn=config.weightnet_bn,
        )
        self.post_bn = T.BatchNormState(spec.c_out) if config.post_activation else None
        self.c_out = spec.c_out

    def geometry(self, fine, coarse, train):
        need_density = self.config.density_mode != "disabled"
        key = ("prop", self.spec.k, self.config.kde_bandwidth, need_density, coarse.n)
        if not train and key in fine._cache:
            return fine._cache[key]
        idx, w = P._three_nn(fine.positions, coarse.positions)
        neigh = P.self_geometry(
            fine, self.spec.k,
            bandwidth=self.config.kde_bandwidth if need_density else None,
            keep_sq=train,
        )
        if not train:
            fine._cache[key] = (idx, w, neigh)
        return idx, w, neigh

    def forward(self, coarse_clouds, coarse_features, coarse_bases,
                fine_clouds, fine_bases, skip_features, train):
        """Propagate a whole batch, flattened across clouds (see EncoderLevel)."""
        idx3, w3, nidx, local, ginv = [], [], [], [], []
        for i, (fine, coarse) in enumerate(zip(fine_clouds, coarse_clouds)):
            idx, w, neigh = self.geometry(fine, coarse, train)
            idx3.append(idx + coarse_bases[i])
            w3.append(w)
            nidx.append(neigh.neighbor_indices + fine_bases[i])
            local.append(neigh.local_coords)
            ginv.append(neigh.grouped_inverse_density)
        gathered = T.gather(coarse_features, np.concatenate(idx3))
        weights = Tensor(np.concatenate(w3)[:, :, None])
        interp = T.reduce_sum(T.mul(gathered, weights), axis=1)
        cat = T.concat([interp, skip_features], axis=1)
        grouped = T.gather(cat, np.concatenate(nidx))
        inv = np.concatenate(ginv) if ginv[0] is not None else None
        out = C.pointconv_efficient(
            self.conv, np.concatenate(local), grouped, inv, train=train
        )
        if self.post_bn is not None:
            out = T.relu(T.batch_norm(out, self.post_bn, train))
        return out

    def forward_single(self, coarse_cloud, coarse_features, fine_cloud, skip_features, train=False):
        return self.forward([coarse_cloud], coarse_features, np.array([0, coarse_cloud.n]),
                            [fine_cloud], np.array([0, fine_cloud.n]), skip_features, train)

    def collect(self, prefix, params, bn_states):
        params.update(self.conv.named_parameters(prefix=f"{prefix}conv."))
        if self.post_bn is not None:
            bn_states[f"{prefix}post.bn"] = self.post_bn


class _Head:
    """FC stack with optional batch norm, dropout before the final layer."""

    def __init__(self, c_in, config, rng):
        self.config = config
        self.weights, self.biases, self.bns = [], [], []
        ch = c_in
        for w in config.head_widths:
            self.weights.append(Tensor(C.xavier_uniform(rng, ch, w), requires_grad=True))
            self.biases.append(Tensor(np.zeros(w), requires_grad=True))
            self.bns.append(T.BatchNormState(w) if config.head_batch_norm else None)
            ch = w
        self.out_w = Tensor(C.xavier_uniform(rng, ch, config.num_classes), requires_grad=True)
        self.out_b = Tensor(np.zeros(config.num_classes), requires_grad=True)

    def forward(self, x, train, rng):
        for w, b, bn in zip(self.weights, self.biases, self.bns):
            x = T.linear(x, w, b)
            if bn is not None:
                x = T.batch_norm(x, bn, train)
            x = T.relu(x)
        if train and self.config.head_dropout > 0:
            if rng is None:
                raise ConfigError("training forward with dropout needs an rng")
            x = T.dropout(x, self.config.head_dropout, rng, train)
        return T.linear(x, self.out_w, self.out_b)

    def collect(self, prefix, params, bn_states):
        for i, (w, b, bn) in enumerate(zip(self.weights, self.biases, self.bns)):
            params[f"{prefix}l{i}.w"] = w
            params[f"{prefix}l{i}.b"] = b
            if bn is not None:
                bn_states[f"{prefix}l{i}.bn"] = bn
        params[f"{prefix}out.w"] = self.out_w
        params[f"{prefix}out.b"] = self.out_b


class PointConvNet:
    """Classification or segmentation network over point clouds."""

    def __init__(self, config: NetworkConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoders = []
        ch = config.input_channels
        skip_channels = []
        for spec in config.encoders:
            level = EncoderLevel(spec, ch, config, rng)
            skip_channels.append(level.pre_mlp.c_out if level.pre_mlp else ch)
            self.encoders.append(level)
            ch = level.c_out
        self.propagators = []
        if config.task == "segment":
            for spec in config.propagators:
                # skip level s feeds back the features living at that resolution:
                # encoder s's pre-MLP output (or its raw input when it has none)
                level = PropagationLevel(spec, ch, skip_channels[spec.skip_level], config, rng)
                self.propagators.append(level)
                ch = level.c_out
        self.head = _Head(ch, config, rng)

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self):
        params, bn_states = {}, {}
        self._collect(params, bn_states)
        for name, bn in bn_states.items():
            params[f"{name}.gamma"] = bn.gamma
            params[f"{name}.beta"] = bn.beta
        return params

    def named_bn_states(self):
        params, bn_states = {}, {}
        self._collect(params, bn_states)
        return bn_states

    def _collect(self, params, bn_states):
        for i, enc in enumerate(self.encoders):
            enc.collect(f"enc{i}.", params, bn_states)
        for i, prop in enumerate(self.propagators):
            prop.collect(f"prop{i}.", params, bn_states)
        self.head.collect("head.", params, bn_states)

    def parameter_count(self):
        return sum(p.size for p in self.named_parameters().values())

    # -- forward passes -------------------------------------------------------

    def _initial_features(self, clouds):
        rows = []
        for cloud in clouds:
            feats = np.ones((cloud.n, 1)) if cloud.features is None else cloud.features
            if feats.shape[1] != self.config.input_channels:
                raise ConfigError(
                    f"cloud has {feats.shape[1]} feature channels, config expects {self.config.input_channels}"
                )
            if cloud.positions.shape[1] != self.config.input_dim:
                raise ConfigError(
                    f"cloud is {cloud.positions.shape[1]}-d, config expects {self.config.input_dim}-d"
                )
            rows.append(np.asarray(feats, dtype=T.default_dtype()))
        bases = np.concatenate([[0], np.cumsum([c.n for c in clouds])])
        return Tensor(np.concatenate(rows)), bases

    def _encode_chain(self, clouds, train, rng):
        """All encoding levels over a flattened batch; returns per-level state."""
        feats, bases = self._initial_features(clouds)
        levels = []  # (clouds, bases, skip rows) at each level's input resolution
        for enc in self.encoders:
            subclouds, out, new_bases, skip = enc.forward(clouds, feats, bases, train, rng)
            levels.append((clouds, bases, skip))
            clouds, bases, feats = subclouds, new_bases, out
        return clouds, bases, feats, levels

    def forward_batch(self, clouds, train=False, rng=None):
        """Logits for a batch: (B, classes) or (sum N, classes) per task."""
        clouds = list(clouds)
        if self.config.task == "classify":
            _, _, feats, _ = self._encode_chain(clouds, train, rng)
            n_last = self.encoders[-1].spec.n_out
            pooled = T.reduce_mean(
                T.reshape(feats, (len(clouds), n_last, feats.shape[-1])), axis=1
            )
            return self.head.forward(pooled, train, rng)

        cur_clouds, cur_bases, feats, levels = self._encode_chain(clouds, train, rng)
        for prop in self.propagators:
            fine_clouds, fine_bases, skip = levels[prop.spec.skip_level]
            feats = prop.forward(cur_clouds, feats, cur_bases,
                                 fine_clouds, fine_bases, skip, train)
            cur_clouds, cur_bases = fine_clouds, fine_bases
        return self.head.forward(feats, train, rng)

    def forward(self, cloud, train=False, rng=None):
        return self.forward_batch([cloud], train=train, rng=rng)

    def point_features(self, cloud, train=False, rng=None):
        """Per-point features at input resolution for one segmentation cloud."""
        cur_clouds, cur_bases, feats, levels = self._encode_chain([cloud], train, rng)
        for prop in self.propagators:
            fine_clouds, fine_bases, skip = levels[prop.spec.skip_level]
            feats = prop.forward(cur_clouds, feats, cur_bases,
                                 fine_clouds, fine_bases, skip, train)
            cur_clouds, cur_bases = fine_clouds, fine_bases
        return feats


def parameter_count(config: NetworkConfig) -> int:
    """Closed-form trainable parameter count for a configuration."""
    config.validate()
    d = config.input_dim
    density = 177 if config.density_mode == "mlp" else 0  # widths 1-16-8-1

    def weightnet(c_in, c_mid, c_out):
        n = d * c_mid + c_mid
        n += (config.weightnet_layers - 1) * (c_mid * c_mid + c_mid)
        if config.weightnet_bn:
            n += 2 * c_mid * config.weightnet_layers
        n += c_mid * (c_in * c_out) + c_in * c_out
        return n

    total = 0
    ch = config.input_channels
    skip_channels = []
    for spec in config.encoders:
        for w in spec.mlp_channels:
            total += ch * w + w + 2 * w
            ch = w
        skip_channels.append(ch)
        total += weightnet(ch, spec.c_mid, spec.c_out) + density
        if config.post_activation:
            total += 2 * spec.c_out
        ch = spec.c_out
    for spec in config.propagators:
        total += weightnet(ch + skip_channels[spec.skip_level], spec.c_mid, spec.c_out) + density
        if config.post_activation:
            total += 2 * spec.c_out
        ch = spec.c_out
    for w in config.head_widths:
        total += ch * w + w
        if config.head_batch_norm:
            total += 2 * w
        ch = w
    total += ch * config.num_classes + config.num_classes
    return total


# -- checkpoint serialization -------------------------------------------------


def _entries(net: PointConvNet):
    for name, p in net.named_parameters().items():
        yield name, p.data
    for name, bn in net.named_bn_states().items():
        yield f"{name}.running_mean", bn.running_mean
        yield f"{name}.running_var", bn.running_var


def save_params(net: PointConvNet, path) -> None:
    """Write magic, version, embedded JSON config, then named raw tensors."""
    dtype = next(iter(net.named_parameters().values())).data.dtype
    meta = {"config": net.config.to_dict(), "dtype": dtype.name}
    blob = json.dumps(meta, sort_keys=True).encode()
    entries = list(_entries(net))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=f"<{dtype.str[1:]}").tobytes())


def _read(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: expected {n} bytes for {what}, got {len(data)}")
    return data


def load_params(path) -> PointConvNet:
    """Rebuild a network from a checkpoint; round-trips bitwise."""
    with open(path, "rb") as fh:
        if _read(fh, 4, "magic") != MAGIC:
            raise CheckpointError("bad magic: not a checkpoint file")
        (version,) = struct.unpack("<I", _read(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (jlen,) = struct.unpack("<I", _read(fh, 4, "header length"))
        meta = json.loads(_read(fh, jlen, "header"))
        config = NetworkConfig.from_dict(meta["config"])
        dtype = np.dtype(meta["dtype"])
        with T.precision(dtype.name):
            net = PointConvNet(config)
        slots = dict(_entries(net))
        targets = net.named_parameters()
        bn_states = net.named_bn_states()
        (count,) = struct.unpack("<I", _read(fh, 4, "entry count"))
        if count != len(slots):
            raise CheckpointError(f"checkpoint has {count} tensors, network expects {len(slots)}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read(fh, 4, "name length"))
            name = _read(fh, nlen, "name").decode()
            (rank,) = struct.unpack("<I", _read(fh, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read(fh, 4 * rank, "dims"))
            if name not in slots:
                raise CheckpointError(f"unknown tensor {name!r} in checkpoint")
            want = slots[name].shape
            if tuple(dims) != want:
                raise CheckpointError(f"tensor {name!r} has shape {tuple(dims)}, network expects {want}")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            arr = np.frombuffer(_read(fh, nbytes, f"data for {name!r}"), dtype=f"<{dtype.str[1:]}")
            arr = np.ascontiguousarray(arr.reshape(dims)).astype(dtype)
            if name in targets:
                targets[name].data = arr
            elif name.endswith(".running_mean"):
                bn_states[name[: -len(".running_mean")]].running_mean = arr
            elif name.endswith(".running_var"):
                bn_states[name[: -len(".running_var")]].running_var = arr
        extra = fh.read(1)
        if extra:
            raise CheckpointError("trailing bytes after last tensor")
    return net
