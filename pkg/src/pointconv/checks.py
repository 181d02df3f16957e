"""Verification routines behind the CLI's verify commands.

Each check compares an optimized path against an independent reference:
the factored convolution against the filter-materializing one, measured
allocation counts against closed-form byte accounting, and the operator on
a regular grid against a sliding-window discrete convolution. The grid CNN
baseline used for image-parity experiments also lives here, built from the
same tensor primitives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pointconv import conv as C
from pointconv import data as D
from pointconv import pointops as P
from pointconv import tensor as T
from pointconv.tensor import Tensor

__all__ = [
    "equivalence_suite",
    "memory_report",
    "grid_reduction_check",
    "gradcheck_suite",
    "GridConvNet",
]

FLOAT32_TOL = 1e-5
FLOAT64_TOL = 1e-10


def _random_case(rng, dims, density_mode="mlp"):
    b, n, k, c_in, c_mid, c_out = dims
    layer = C.PointConvLayer(3, c_in, c_mid, c_out, rng, density_mode=density_mode, k_hint=k)
    local = rng.uniform(-1, 1, (b, n, k, 3))
    feats = rng.uniform(-1, 1, (b, n, k, c_in))
    inv = rng.uniform(0.05, 1.0, (b, n, k))
    return layer, local, feats, inv


def equivalence_suite(trials, dims, seed, check_grads=True):
    """Compare factored vs reference forward (and parameter gradients).

    Returns a dict with the max relative differences and the tolerance for
    the active precision.
    """
    rng = np.random.default_rng(seed)
    tol = FLOAT64_TOL if T.default_dtype() == np.dtype(np.float64) else FLOAT32_TOL
    max_fwd = 0.0
    max_grad = 0.0
    for _ in range(trials):
        layer, local, feats, inv = _random_case(rng, dims)
        a = C.pointconv_naive(layer, local, feats, inv).data
        b = C.pointconv_efficient(layer, local, feats, inv).data
        max_fwd = max(max_fwd, T.max_rel_diff(a, b))
        if check_grads:
            proj = Tensor(rng.normal(size=a.shape))
            grads = {}
            for name, fn in (("naive", C.pointconv_naive), ("efficient", C.pointconv_efficient)):
                with T.record():
                    out = fn(layer, local, feats, inv)
                    T.backward(T.reduce_sum(T.mul(out, proj)))
                grads[name] = {k: p.grad.copy() for k, p in layer.named_parameters().items()}
                for p in layer.named_parameters().values():
                    p.grad = None
            for key in grads["naive"]:
                max_grad = max(max_grad, T.max_rel_diff(grads["naive"][key], grads["efficient"][key]))
    return {
        "trials": trials,
        "dims": tuple(dims),
        "max_forward_rel_err": max_fwd,
        "max_grad_rel_err": max_grad,
        "tolerance": tol,
        "passed": max_fwd < tol and max_grad < tol,
    }


def memory_report(b, n, k, c_in, c_out, c_mid, measure_dims=None):
    """Analytic filter-memory accounting plus measured allocation counts.

    Analytic numbers use 4-byte elements: the reference path stores
    b*n*k*c_in*c_out filter weights; the factored path's dominant buffers
    are the b*n*c_in*c_mid contraction result plus the c_mid*c_in*c_out
    final-layer kernel. Measured counts come from running both operators at
    ``measure_dims`` under the allocation tracker.
    """
    itemsize = 4
    naive_bytes = b * n * k * c_in * c_out * itemsize
    efficient_bytes = (b * n * c_in * c_mid + c_mid * c_in * c_out) * itemsize
    report = {
        "dims": {"b": b, "n": n, "k": k, "c_in": c_in, "c_out": c_out, "c_mid": c_mid},
        "analytic_naive_bytes": naive_bytes,
        "analytic_efficient_bytes": efficient_bytes,
        "analytic_ratio": c_mid / (k * c_out),
    }

    mb, mn, mk, mc_in, mc_mid, mc_out = measure_dims or (2, 64, k, c_in, c_mid, c_out)
    rng = np.random.default_rng(0)
    layer, local, feats, inv = _random_case(rng, (mb, mn, mk, mc_in, mc_mid, mc_out), density_mode="disabled")
    with T.track_allocations() as log_naive:
        C.pointconv_naive(layer, local, feats, inv)
    with T.track_allocations() as log_eff:
        C.pointconv_efficient(layer, local, feats, inv)

    naive_elems = log_naive.labeled["naive.filters"]
    eff = log_eff.labeled
    dominant = max(eff["efficient.m"], eff["efficient.fbar"], eff["efficient.product"])
    report["measured"] = {
        "dims": (mb, mn, mk, mc_in, mc_mid, mc_out),
        "naive_filter_elements": naive_elems,
        "efficient_m_elements": eff["efficient.m"],
        "efficient_fbar_elements": eff["efficient.fbar"],
        "efficient_product_elements": eff["efficient.product"],
        "efficient_peak_elements": max(eff["efficient.m"], eff["efficient.fbar"]) + eff["efficient.product"],
        "efficient_max_single_allocation": log_eff.max_single,
        "dominant_ratio": dominant / naive_elems,
        "ratio_slack": mb * mn * mc_in * mc_mid / naive_elems,
    }
    return report


def _grid_cloud(side, channels, rng):
    img = rng.uniform(0, 1, (side, side, channels)).astype(np.float32)
    return D.image_to_pointcloud(img), img


def _stencil_oracle(layer, offsets):
    """Direct numpy MLP evaluation of the filter at fixed offsets, 64-bit."""
    h = np.asarray(offsets, dtype=np.float64)
    n = len(layer.weight_net.hidden_w)
    for i in range(n):
        h = h @ layer.weight_net.hidden_w[i].data.astype(np.float64)
        h = h + layer.weight_net.hidden_b[i].data.astype(np.float64)
        if i + 1 < n:
            h = np.maximum(h, 0.0)
    w = h @ layer.weight_net.final_w.data.astype(np.float64)
    w = w + layer.weight_net.final_b.data.astype(np.float64)
    return w.reshape(len(offsets), layer.c_in, layer.c_out)


def grid_reduction_check(side, kernel=3, seed=0, c_in=2, c_mid=4, c_out=3):
    """On a regular grid the operator must equal a discrete convolution.

    Builds a grid cloud, runs one density-disabled convolution with
    K=kernel^2 over every pixel, then compares interior outputs against a
    sliding-window oracle whose stencil is the weight function sampled at
    the kernel offsets.
    """
    if side < kernel + 2:
        raise ValueError(f"side must be >= kernel+2, got side={side} kernel={kernel}")
    rng = np.random.default_rng(seed)
    cloud, img = _grid_cloud(side, c_in, rng)
    layer = C.PointConvLayer(2, c_in, c_mid, c_out, rng, density_mode="disabled", k_hint=kernel**2)

    neigh = P.knn_group(cloud, np.arange(cloud.n), kernel**2)
    out = C.pointconv_efficient(layer, neigh.local_coords, cloud.features[neigh.neighbor_indices]).data

    # stencil at the grid's own offsets (spacing set by unit-ball scaling)
    spacing = np.linalg.norm(cloud.positions[0] - cloud.positions[1])
    half = kernel // 2
    offs = [(di, dj) for di in range(-half, half + 1) for dj in range(-half, half + 1)]
    stencil = _stencil_oracle(layer, np.array(offs, dtype=np.float64) * spacing)

    img64 = img.astype(np.float64)
    max_err = 0.0
    interior = 0
    weights_spread = 0.0
    ref_rows = None
    for i in range(half, side - half):
        for j in range(half, side - half):
            acc = np.zeros(layer.c_out)
            for o, (di, dj) in enumerate(offs):
                acc += img64[i + di, j + dj] @ stencil[o]
            got = out[i * side + j]
            max_err = max(max_err, T.max_rel_diff(acc, got))
            interior += 1
            # weights are a shared function of the (identical) local offsets
            rows = layer.weight_net.hidden(Tensor(neigh.local_coords[i * side + j])).data
            rows = rows[np.lexsort(neigh.local_coords[i * side + j].T[::-1])]
            if ref_rows is None:
                ref_rows = rows
            else:
                weights_spread = max(weights_spread, float(np.abs(rows - ref_rows).max()))
    return {
        "side": side,
        "kernel": kernel,
        "seed": seed,
        "interior_points": interior,
        "max_rel_err": max_err,
        "interior_weight_spread": weights_spread,
        "passed": max_err < FLOAT32_TOL,
    }


# -- gradient-check suite -------------------------------------------------------


def gradcheck_suite(seeds=(1, 2, 3)):
    """Finite-difference checks for every differentiable component.

    Runs in 64-bit mode and returns {component: max relative error} over the
    given seeds, checking inputs and all parameters of each component.
    """
    if T.default_dtype() != np.dtype(np.float64):
        raise T.TensorError("gradcheck_suite requires 64-bit mode")
    from pointconv import network as N

    results = {}

    def check(component, err):
        results[component] = max(results.get(component, 0.0), err)

    for seed in seeds:
        rng = np.random.default_rng(seed)

        dnet = C.DensityNet(rng)
        x = Tensor(rng.uniform(0.1, 0.9, (6, 1)), requires_grad=True)
        check("density_net", T.gradient_check(lambda t: T.reduce_sum(dnet.forward(t)), x))
        for name, p in dnet.named_parameters().items():
            xc = Tensor(x.data.copy())
            check("density_net", T.gradient_check(lambda t, _p=p: T.reduce_sum(dnet.forward(xc)), p))

        wnet_layer = C.PointConvLayer(3, 2, 3, 2, rng, density_mode="disabled")
        coords = rng.uniform(-1, 1, (5, 3))
        coords[np.abs(coords) < 0.05] = 0.1

        def wnet_loss(_unused=None):
            m = wnet_layer.weight_net.hidden(coords_t)
            w = T.linear(m, wnet_layer.weight_net.final_w, wnet_layer.weight_net.final_b)
            return T.reduce_sum(T.mul(w, w))

        coords_t = Tensor(coords, requires_grad=True)
        check("weight_net", T.gradient_check(lambda t: wnet_loss(), coords_t))
        for name, p in wnet_layer.weight_net.named_parameters().items():
            check("weight_net", T.gradient_check(lambda t, _p=p: wnet_loss(), p))

        layer, local, feats, inv = _random_case(rng, (1, 4, 4, 2, 3, 3))
        proj = Tensor(rng.normal(size=(1, 4, 3)))

        def layer_loss(feat_t):
            out = C.pointconv_efficient(layer, local, feat_t, inv)
            return T.reduce_sum(T.mul(out, proj))

        feats_t = Tensor(feats, requires_grad=True)
        check("pointconv_layer", T.gradient_check(layer_loss, feats_t))
        feats_const = Tensor(feats)
        for name, p in layer.named_parameters().items():
            check("pointconv_layer", T.gradient_check(lambda t, _p=p: layer_loss(feats_const), p))

        cfg = N.NetworkConfig(
            task="segment", input_dim=3, input_channels=2, num_classes=2,
            encoders=[N.EncodingSpec(n_out=4, k=3, c_mid=2, c_out=2)],
            propagators=[N.PropagationSpec(skip_level=0, k=3, c_mid=2, c_out=3)],
            seed=seed,
        ).validate()
        prop = N.PropagationLevel(cfg.propagators[0], 2, 2, cfg, rng)
        fine = P.PointCloud(rng.uniform(-1, 1, (10, 3)))
        coarse = P.PointCloud(rng.uniform(-1, 1, (4, 3)))
        skip_f = Tensor(rng.normal(size=(10, 2)))
        proj2 = Tensor(rng.normal(size=(10, 3)))

        def prop_loss(coarse_t):
            out = prop.forward_single(coarse, coarse_t, fine, skip_f, train=True)
            return T.reduce_sum(T.mul(out, proj2))

        coarse_t = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        check("propagation", T.gradient_check(prop_loss, coarse_t))
        coarse_const = Tensor(coarse_t.data.copy())
        prop_params = {}
        prop_bns = {}
        prop.collect("prop.", prop_params, prop_bns)
        for name, bn in prop_bns.items():
            prop_params[f"{name}.gamma"] = bn.gamma
            prop_params[f"{name}.beta"] = bn.beta
        for name, p in prop_params.items():
            check("propagation", T.gradient_check(lambda t, _p=p: prop_loss(coarse_const), p))

        state = T.BatchNormState(3)
        state.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
        state.beta.data[:] = rng.normal(size=3)
        xbn = Tensor(rng.uniform(-2, 2, (5, 3)), requires_grad=True)

        def bn_loss(t):
            return T.reduce_sum(T.mul(T.batch_norm(t, state, train=True), t))

        check("batch_norm", T.gradient_check(bn_loss, xbn))
        check("batch_norm", T.gradient_check(lambda t: T.reduce_sum(T.mul(T.batch_norm(Tensor(xbn.data.copy()), state, train=True), Tensor(xbn.data.copy()))), state.gamma))

        labels = rng.integers(0, 3, size=6)
        logits = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        check("loss", T.gradient_check(lambda t: T.softmax_cross_entropy(t, labels), logits))

    return results


# -- grid CNN baseline ----------------------------------------------------------


def _patch_indices(side, kernel, stride):
    rows = []
    for i in range(0, side - kernel + 1, stride):
        for j in range(0, side - kernel + 1, stride):
            rows.append([(i + di) * side + (j + dj) for di in range(kernel) for dj in range(kernel)])
    return np.asarray(rows, dtype=np.int64)


@dataclass
class _GridCfg:
    task: str = "classify"
    num_classes: int = 2


class GridConvNet:
    """Direct 3x3 grid convolutions on pixel clouds, same channel structure.

    Works on clouds produced by ``image_to_pointcloud`` (row-major pixel
    order): im2col gathers built from the same tensor primitives, so the
    comparison against the point network isolates the operator, not the
    training stack.
    """

    def __init__(self, side, channels, conv_channels=(32, 64), head_width=32,
                 num_classes=2, kernel=3, stride=2, seed=0):
        rng = np.random.default_rng(seed)
        self.config = _GridCfg(num_classes=num_classes)
        self.side = side
        self.kernel, self.stride = kernel, stride
        self.layers = []
        ch, s = channels, side
        for c_out in conv_channels:
            idx = _patch_indices(s, kernel, stride)
            w = Tensor(C.xavier_uniform(rng, kernel * kernel * ch, c_out), requires_grad=True)
            b = Tensor(np.zeros(c_out), requires_grad=True)
            bn = T.BatchNormState(c_out)
            s_out = (s - kernel) // stride + 1
            self.layers.append({"idx": idx, "w": w, "b": b, "bn": bn, "side": s_out})
            ch, s = c_out, s_out
        self.head_w = Tensor(C.xavier_uniform(rng, ch, head_width), requires_grad=True)
        self.head_b = Tensor(np.zeros(head_width), requires_grad=True)
        self.head_bn = T.BatchNormState(head_width)
        self.out_w = Tensor(C.xavier_uniform(rng, head_width, num_classes), requires_grad=True)
        self.out_b = Tensor(np.zeros(num_classes), requires_grad=True)

    def named_parameters(self):
        params = {}
        for i, layer in enumerate(self.layers):
            params[f"conv{i}.w"] = layer["w"]
            params[f"conv{i}.b"] = layer["b"]
            params[f"conv{i}.bn.gamma"] = layer["bn"].gamma
            params[f"conv{i}.bn.beta"] = layer["bn"].beta
        params["head.w"] = self.head_w
        params["head.b"] = self.head_b
        params["head.bn.gamma"] = self.head_bn.gamma
        params["head.bn.beta"] = self.head_bn.beta
        params["out.w"] = self.out_w
        params["out.b"] = self.out_b
        return params

    def forward_batch(self, clouds, train=False, rng=None):
        # flatten the batch so batch norm sees every image jointly
        b = len(clouds)
        x = Tensor(np.concatenate([c.features for c in clouds]))  # (B*side^2, C)
        n_loc = self.side * self.side
        for layer in self.layers:
            idx = np.concatenate([layer["idx"] + i * n_loc for i in range(b)])
            patches = T.gather(x, idx)
            flat = T.reshape(patches, (patches.shape[0], -1))
            x = T.linear(flat, layer["w"], layer["b"])
            x = T.relu(T.batch_norm(x, layer["bn"], train))
            n_loc = layer["side"] * layer["side"]
        pooled = T.reduce_mean(T.reshape(x, (b, n_loc, x.shape[-1])), axis=1)
        x = T.relu(T.batch_norm(T.linear(pooled, self.head_w, self.head_b), self.head_bn, train))
        return T.linear(x, self.out_w, self.out_b)

    def forward(self, cloud, train=False, rng=None):
        return self.forward_batch([cloud], train=train, rng=rng)
