"""The point convolution operator.

A shared MLP (WeightNet) maps each neighbor's local coordinate to filter
weights; a scalar MLP (DensityNet) turns normalized inverse density into a
multiplicative scale. The operator comes in two mathematically equivalent
forms:

* ``pointconv_naive`` materializes the full per-neighbor filter tensor of
  shape (..., K, C_in, C_out) and contracts it directly — the reference.
* ``pointconv_efficient`` swaps the summation order: it contracts the
  density-scaled features with the WeightNet's penultimate activations
  first, producing a (..., C_in, C_mid) matrix per region, then applies the
  final linear layer. The (K, C_in, C_out) tensor is never allocated, so
  the dominant transient shrinks by a factor of C_mid / (K * C_out).

The final WeightNet layer's bias adds a constant per (c_in, c_out) to every
neighbor's filter; the factored path folds it exactly as
(sum_k fbar) @ bias, keeping the two forms equal in exact arithmetic.
"""

from __future__ import annotations

import csv

import numpy as np

from pointconv import tensor as T
from pointconv.tensor import Tensor

__all__ = [
    "WeightNet",
    "DensityNet",
    "PointConvLayer",
    "weight_net_hidden",
    "density_scale",
    "pointconv_naive",
    "pointconv_efficient",
    "sample_weight_function",
    "write_pgm",
    "write_filter_csv",
]

DENSITY_MODES = ("mlp", "disabled", "raw")


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


class WeightNet:
    """MLP from a d-dim local coordinate to C_in*C_out filter weights.

    Hidden stack: d -> c_mid -> ... -> c_mid with ReLU between hidden
    layers (optional batch norm), then a strictly linear final layer
    c_mid -> c_in*c_out with bias. The hidden output is the M matrix of the
    factored path; the final layer is its 1x1 convolution kernel H.
    """

    def __init__(self, dim, c_mid, c_in, c_out, rng, hidden_layers=2, k_hint=16, batch_norm=False):
        if c_mid < 1 or hidden_layers < 1:
            raise ValueError("weight net needs c_mid >= 1 and at least one hidden layer")
        self.dim, self.c_mid, self.c_in, self.c_out = dim, c_mid, c_in, c_out
        self.hidden_w: list[Tensor] = []
        self.hidden_b: list[Tensor] = []
        self.bn_states: list[T.BatchNormState] | None = [] if batch_norm else None
        widths = [dim] + [c_mid] * hidden_layers
        for a, b in zip(widths[:-1], widths[1:]):
            self.hidden_w.append(Tensor(xavier_uniform(rng, a, b), requires_grad=True))
            # nonzero bias: the self-neighbor always feeds the zero coordinate,
            # so zero biases would pin its pre-activations on the ReLU kink
            self.hidden_b.append(Tensor(rng.uniform(-0.1, 0.1, b), requires_grad=True))
            if batch_norm:
                self.bn_states.append(T.BatchNormState(b))
        # final layer scaled so K-neighbor sums start O(1)
        scale = 1.0 / np.sqrt(c_mid * k_hint)
        self.final_w = Tensor(rng.uniform(-scale, scale, (c_mid, c_in * c_out)), requires_grad=True)
        self.final_b = Tensor(np.zeros(c_in * c_out), requires_grad=True)

    def hidden(self, coords: Tensor, train: bool = False) -> Tensor:
        """Apply the hidden stack pointwise; returns M of shape (..., c_mid)."""
        h = coords
        for i, (w, b) in enumerate(zip(self.hidden_w, self.hidden_b)):
            h = T.linear(h, w, b)
            if self.bn_states is not None:
                flat = T.reshape(h, (-1, h.shape[-1]))
                h = T.reshape(T.batch_norm(flat, self.bn_states[i], train), h.shape)
            if i + 1 < len(self.hidden_w):
                h = T.relu(h)
        return h

    def named_parameters(self, prefix=""):
        out = {}
        for i, (w, b) in enumerate(zip(self.hidden_w, self.hidden_b)):
            out[f"{prefix}hidden{i}.w"] = w
            out[f"{prefix}hidden{i}.b"] = b
            if self.bn_states is not None:
                out[f"{prefix}hidden{i}.bn.gamma"] = self.bn_states[i].gamma
                out[f"{prefix}hidden{i}.bn.beta"] = self.bn_states[i].beta
        out[f"{prefix}final.w"] = self.final_w
        out[f"{prefix}final.b"] = self.final_b
        return out


class DensityNet:
    """Scalar MLP: normalized inverse density -> scale in (0, 1).

    Fixed hidden widths 16 and 8 with ReLU, sigmoid output.
    """

    WIDTHS = (16, 8)

    def __init__(self, rng):
        widths = (1,) + self.WIDTHS + (1,)
        self.weights = [Tensor(xavier_uniform(rng, a, b), requires_grad=True) for a, b in zip(widths[:-1], widths[1:])]
        self.biases = [Tensor(np.zeros(b), requires_grad=True) for b in widths[1:]]

    def forward(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = T.linear(h, w, b)
            h = T.sigmoid(h) if i == last else T.relu(h)
        return h

    def named_parameters(self, prefix=""):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}l{i}.w"] = w
            out[f"{prefix}l{i}.b"] = b
        return out


class PointConvLayer:
    """One convolution layer: WeightNet, optional DensityNet, channel sizes."""

    def __init__(self, dim, c_in, c_mid, c_out, rng, density_mode="mlp",
                 weightnet_layers=2, k_hint=16, weightnet_bn=False):
        if density_mode not in DENSITY_MODES:
            raise ValueError(f"density_mode must be one of {DENSITY_MODES}, got {density_mode!r}")
        self.dim, self.c_in, self.c_mid, self.c_out = dim, c_in, c_mid, c_out
        self.density_mode = density_mode
        self.weight_net = WeightNet(dim, c_mid, c_in, c_out, rng,
                                    hidden_layers=weightnet_layers, k_hint=k_hint,
                                    batch_norm=weightnet_bn)
        self.density_net = DensityNet(rng) if density_mode == "mlp" else None

    def named_parameters(self, prefix=""):
        out = self.weight_net.named_parameters(prefix=f"{prefix}wnet.")
        if self.density_net is not None:
            out.update(self.density_net.named_parameters(prefix=f"{prefix}dnet."))
        return out


def weight_net_hidden(layer: PointConvLayer, local_coords, train: bool = False) -> Tensor:
    """Penultimate WeightNet activations M for (..., K, d) local coordinates."""
    coords = T.as_tensor(local_coords)
    if coords.shape[-1] != layer.dim:
        raise T.TensorError(f"local coords last extent {coords.shape[-1]} != layer dim {layer.dim}")
    return layer.weight_net.hidden(coords, train=train)


def density_scale(layer: PointConvLayer, grouped_inverse_density) -> Tensor:
    """Per-neighbor scale S for a (..., K) normalized inverse density."""
    if layer.density_mode == "disabled":
        shape = (1,) if grouped_inverse_density is None else np.shape(grouped_inverse_density)
        return Tensor(np.ones(shape))
    if grouped_inverse_density is None:
        raise T.TensorError("density_mode %r needs grouped inverse densities" % layer.density_mode)
    inv = T.as_tensor(grouped_inverse_density)
    if layer.density_mode == "raw":
        return inv
    out = layer.density_net.forward(T.reshape(inv, inv.shape + (1,)))
    return T.reshape(out, inv.shape)


def _scaled_features(layer, grouped_features, grouped_inverse_density):
    f = T.as_tensor(grouped_features)
    if f.shape[-1] != layer.c_in:
        raise T.TensorError(f"grouped features channels {f.shape[-1]} != layer c_in {layer.c_in}")
    if layer.density_mode == "disabled":
        return f
    s = density_scale(layer, grouped_inverse_density)
    return T.mul(f, T.reshape(s, s.shape + (1,)))


def pointconv_naive(layer, local_coords, grouped_features, grouped_inverse_density=None,
                    train: bool = False) -> Tensor:
    """Reference form: materialize per-neighbor filters and contract.

    out[..., c_out] = sum_k sum_cin S[..., k] * W[..., k, cin, c_out] * F[..., k, cin]

    As the correctness reference, the materialized contraction runs at
    64-bit internally; inputs and outputs stay in the build element type.
    """
    m = weight_net_hidden(layer, local_coords, train=train)        # (..., K, c_mid)
    w = T.linear(T.cast(m, np.float64), layer.weight_net.final_w, layer.weight_net.final_b)
    k = w.shape[-2]
    lead = w.shape[:-2]
    w = T.reshape(w, lead + (k, layer.c_in, layer.c_out))          # (..., K, c_in, c_out)
    T.label_allocation("naive.filters", w.size)
    fbar = _scaled_features(layer, grouped_features, grouped_inverse_density)
    prod = T.mul(w, T.reshape(T.cast(fbar, np.float64), lead + (k, layer.c_in, 1)))
    out = T.reduce_sum(T.reduce_sum(prod, axis=-2), axis=-2)
    return T.cast(out, T.default_dtype())


def pointconv_efficient(layer, local_coords, grouped_features, grouped_inverse_density=None,
                        train: bool = False) -> Tensor:
    """Factored form: contract features with M first, then apply H.

    Computes fbar^T @ M per region ((..., c_in, c_mid)), flattens, and maps
    through the final layer's weights reordered as a (c_in*c_mid, c_out)
    matrix; the bias folds in as (sum_k fbar) @ bias. Equal to the naive
    form in exact arithmetic without ever allocating (K, c_in, c_out).
    """
    m = weight_net_hidden(layer, local_coords, train=train)        # (..., K, c_mid)
    T.label_allocation("efficient.m", m.size)
    fbar = _scaled_features(layer, grouped_features, grouped_inverse_density)
    T.label_allocation("efficient.fbar", fbar.size)
    ndim = len(fbar.shape)
    axes = tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)
    prod = T.matmul(T.transpose(fbar, axes), m)                    # (..., c_in, c_mid)
    T.label_allocation("efficient.product", prod.size)

    lead = prod.shape[:-2]
    h = T.reshape(layer.weight_net.final_w, (layer.c_mid, layer.c_in, layer.c_out))
    h2 = T.reshape(T.transpose(h, (1, 0, 2)), (layer.c_in * layer.c_mid, layer.c_out))
    flat = T.reshape(prod, (-1, layer.c_in * layer.c_mid))
    out = T.reshape(T.matmul(flat, h2), lead + (layer.c_out,))

    fsum = T.reduce_sum(fbar, axis=-2)                             # (..., c_in)
    bias = T.reshape(layer.weight_net.final_b, (layer.c_in, layer.c_out))
    bias_term = T.reshape(T.matmul(T.reshape(fsum, (-1, layer.c_in)), bias), lead + (layer.c_out,))
    return T.add(out, bias_term)


def sample_weight_function(layer: PointConvLayer, plane_axis=2, plane_offset=0.0,
                           side=32, extent=1.0) -> np.ndarray:
    """Sample the learned filter on a plane; returns (side, side, c_in, c_out).

    For 3-d layers the grid spans [-extent, extent]^2 on the two in-plane
    axes with the remaining coordinate fixed at ``plane_offset``; 2-d layers
    use the grid directly.
    """
    lin = np.linspace(-extent, extent, side)
    u, v = np.meshgrid(lin, lin, indexing="ij")
    if layer.dim == 3:
        coords = np.zeros((side, side, 3))
        in_plane = [a for a in range(3) if a != plane_axis]
        coords[..., in_plane[0]] = u
        coords[..., in_plane[1]] = v
        coords[..., plane_axis] = plane_offset
    elif layer.dim == 2:
        coords = np.stack([u, v], axis=-1)
    else:
        raise ValueError(f"unsupported layer dim {layer.dim}")
    m = weight_net_hidden(layer, coords.reshape(-1, layer.dim))
    w = T.linear(m, layer.weight_net.final_w, layer.weight_net.final_b)
    return w.data.reshape(side, side, layer.c_in, layer.c_out)


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-d array as a binary 16-bit PGM, min-max scaled."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    pixels = (scaled * 65535).round().astype(">u2")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n65535\n" % (img.shape[1], img.shape[0]))
        fh.write(pixels.tobytes())


def write_filter_csv(path, image: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(image):
            writer.writerow([repr(float(v)) for v in row])


def read_pgm(path) -> np.ndarray:
    """Read back a binary 16-bit PGM written by write_pgm."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"not a binary PGM: {magic!r}")
        w, h = (int(v) for v in fh.readline().split())
        maxval = int(fh.readline())
        data = fh.read()
    dtype = ">u2" if maxval > 255 else np.uint8
    expected = w * h * np.dtype(dtype).itemsize
    if len(data) != expected:
        raise ValueError(f"PGM payload {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype=dtype).reshape(h, w)
