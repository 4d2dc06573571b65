"""Small dense networks with exact reverse-mode gradients and Adam.

Everything is plain float64 numpy. Apart from keeping dependencies down,
owning the backward pass makes it straightforward to route gradients
through selected sub-expressions of a composite objective (the critic
update needs gradients through two different evaluations of the same
network), which autograd frameworks only allow through graph surgery.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

HIDDEN = "relu"
OUT_KINDS = ("linear", "scaled_tanh")


@dataclass
class Mlp:
    """Fully-connected net: affine + ReLU hidden layers, configurable output.

    weights[l] has shape (out, in); biases[l] has shape (out,). Output
    activation is identity ("linear") or out_scale * tanh ("scaled_tanh"),
    the latter bounding output entry j by out_scale (or out_scale[j] when
    the scale is a per-entry vector) in magnitude.
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    out_kind: str = "linear"
    out_scale: float | np.ndarray = 1.0

    def __post_init__(self) -> None:
        if len(self.layer_dims) < 2:
            raise ValueError("need at least an input and an output layer")
        if self.out_kind not in OUT_KINDS:
            raise ValueError(f"unknown output activation {self.out_kind!r}")
        scale = np.asarray(self.out_scale, dtype=np.float64)
        if scale.ndim == 0:
            self.out_scale = float(scale)
        elif scale.shape == (self.layer_dims[-1],):
            self.out_scale = scale
        else:
            raise ValueError(
                f"out_scale shape {scale.shape} does not match output "
                f"dimension {self.layer_dims[-1]}"
            )
        if self.out_kind == "scaled_tanh" and np.any(scale <= 0):
            raise ValueError(f"out_scale must be positive, got {self.out_scale}")
        expected = list(zip(self.layer_dims[1:], self.layer_dims[:-1]))
        if len(self.weights) != len(expected) or len(self.biases) != len(expected):
            raise ValueError("weight/bias count does not match layer_dims")
        for l, (o, i) in enumerate(expected):
            if self.weights[l].shape != (o, i) or self.biases[l].shape != (o,):
                raise ValueError(f"layer {l} parameter shapes do not match layer_dims")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]


@dataclass
class GradientBundle:
    """Per-parameter gradients, same shapes as the network's parameters."""

    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]


@dataclass
class OptimizerState:
    """Adam first/second moments plus the bias-correction step counter."""

    lr: float
    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def parameter_count(mlp: Mlp) -> int:
    return sum(w.size + b.size for w, b in zip(mlp.weights, mlp.biases))


def init_mlp(
    layer_dims: tuple[int, ...] | list[int],
    out_kind: str = "linear",
    out_scale: float | np.ndarray = 1.0,
    seed: int | np.random.SeedSequence = 0,
    final_bound: float | None = None,
) -> Mlp:
    """Fan-in scaled uniform weights, zero biases.

    final_bound, when given, draws the last layer from U(-final_bound,
    final_bound) instead; a tight bound keeps the initial outputs near zero,
    which stops a fresh policy from slamming its environment around.
    """
    dims = tuple(int(d) for d in layer_dims)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    last = len(dims) - 2
    for l, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        if l == last and final_bound is not None:
            bound = final_bound
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(
        layer_dims=dims, weights=weights, biases=biases,
        out_kind=out_kind, out_scale=out_scale,
    )


def _as_batch(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ValueError(f"input length {x.shape[0]} does not match {dim}")
        return x[np.newaxis, :], True
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"input shape {x.shape} does not match (batch, {dim})")
    return x, False


def _forward_cached(mlp: Mlp, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Returns (output, pre-activations per layer, activations per layer)."""
    acts = [x]
    pres = []
    h = x
    last = len(mlp.weights) - 1
    for l, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = h @ W.T + b
        pres.append(z)
        if l < last:
            h = np.maximum(z, 0.0)
        elif mlp.out_kind == "scaled_tanh":
            h = mlp.out_scale * np.tanh(z)
        else:
            h = z
        acts.append(h)
    return h, pres, acts


def forward(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a single input (d,) or a batch (B, d)."""
    xb, squeeze = _as_batch(x, mlp.in_dim)
    out, _, _ = _forward_cached(mlp, xb)
    return out[0] if squeeze else out


def backward(
    mlp: Mlp, x: np.ndarray, upstream: np.ndarray
) -> tuple[GradientBundle, np.ndarray]:
    """Exact gradients of sum(output * upstream) in parameters and input.

    upstream has the output's shape; for a batch, parameter gradients sum
    over the batch rows while the returned input gradient stays per-row.
    """
    xb, squeeze = _as_batch(x, mlp.in_dim)
    up = np.asarray(upstream, dtype=np.float64)
    if squeeze:
        up = up[np.newaxis, :]
    if up.shape != (xb.shape[0], mlp.out_dim):
        raise ValueError(f"upstream shape {upstream.shape} does not match output")
    out, pres, acts = _forward_cached(mlp, xb)
    if mlp.out_kind == "scaled_tanh":
        # d(out)/d(pre) = scale * (1 - tanh^2) = scale - out^2 / scale
        delta = up * (mlp.out_scale - out**2 / mlp.out_scale)
    else:
        delta = up.copy()
    d_weights: list[np.ndarray] = [None] * len(mlp.weights)  # type: ignore[list-item]
    d_biases: list[np.ndarray] = [None] * len(mlp.biases)  # type: ignore[list-item]
    for l in range(len(mlp.weights) - 1, -1, -1):
        d_weights[l] = delta.T @ acts[l]
        d_biases[l] = delta.sum(axis=0)
        if l > 0:
            # ReLU subgradient: 0 at exactly 0
            delta = (delta @ mlp.weights[l]) * (pres[l - 1] > 0.0)
    input_grad = delta @ mlp.weights[0]
    if squeeze:
        input_grad = input_grad[0]
    return GradientBundle(d_weights=d_weights, d_biases=d_biases), input_grad


def zeros_like_bundle(mlp: Mlp) -> GradientBundle:
    return GradientBundle(
        d_weights=[np.zeros_like(w) for w in mlp.weights],
        d_biases=[np.zeros_like(b) for b in mlp.biases],
    )


def bundle_add(a: GradientBundle, b: GradientBundle) -> GradientBundle:
    return GradientBundle(
        d_weights=[x + y for x, y in zip(a.d_weights, b.d_weights)],
        d_biases=[x + y for x, y in zip(a.d_biases, b.d_biases)],
    )


def bundle_scale(a: GradientBundle, c: float) -> GradientBundle:
    return GradientBundle(
        d_weights=[c * x for x in a.d_weights],
        d_biases=[c * x for x in a.d_biases],
    )


def bundle_norm(a: GradientBundle) -> float:
    total = sum(float(np.sum(x**2)) for x in a.d_weights)
    total += sum(float(np.sum(x**2)) for x in a.d_biases)
    return float(np.sqrt(total))


def bundle_is_finite(a: GradientBundle) -> bool:
    return all(np.all(np.isfinite(x)) for x in a.d_weights) and all(
        np.all(np.isfinite(x)) for x in a.d_biases
    )


def init_optimizer(mlp: Mlp, lr: float) -> OptimizerState:
    return OptimizerState(
        lr=lr,
        m_w=[np.zeros_like(w) for w in mlp.weights],
        v_w=[np.zeros_like(w) for w in mlp.weights],
        m_b=[np.zeros_like(b) for b in mlp.biases],
        v_b=[np.zeros_like(b) for b in mlp.biases],
    )


def adam_step(
    mlp: Mlp, grads: GradientBundle, opt: OptimizerState
) -> tuple[Mlp, OptimizerState]:
    """One bias-corrected Adam update; returns fresh network and state."""
    t = opt.step + 1
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t

    def update(p, g, m, v):
        m_new = opt.beta1 * m + (1.0 - opt.beta1) * g
        v_new = opt.beta2 * v + (1.0 - opt.beta2) * g**2
        p_new = p - opt.lr * (m_new / c1) / (np.sqrt(v_new / c2) + opt.eps)
        return p_new, m_new, v_new

    weights, m_w, v_w = [], [], []
    for p, g, m, v in zip(mlp.weights, grads.d_weights, opt.m_w, opt.v_w):
        p2, m2, v2 = update(p, g, m, v)
        weights.append(p2), m_w.append(m2), v_w.append(v2)
    biases, m_b, v_b = [], [], []
    for p, g, m, v in zip(mlp.biases, grads.d_biases, opt.m_b, opt.v_b):
        p2, m2, v2 = update(p, g, m, v)
        biases.append(p2), m_b.append(m2), v_b.append(v2)
    new_mlp = Mlp(
        layer_dims=mlp.layer_dims, weights=weights, biases=biases,
        out_kind=mlp.out_kind, out_scale=mlp.out_scale,
    )
    new_opt = OptimizerState(
        lr=opt.lr, m_w=m_w, v_w=v_w, m_b=m_b, v_b=v_b,
        step=t, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps,
    )
    return new_mlp, new_opt


def clone(mlp: Mlp) -> Mlp:
    scale = mlp.out_scale
    return Mlp(
        layer_dims=mlp.layer_dims,
        weights=[w.copy() for w in mlp.weights],
        biases=[b.copy() for b in mlp.biases],
        out_kind=mlp.out_kind,
        out_scale=scale.copy() if isinstance(scale, np.ndarray) else scale,
    )


def copy_weights(src: Mlp, dst: Mlp) -> Mlp:
    """Hard update: dst's architecture with src's parameter values."""
    if src.layer_dims != dst.layer_dims:
        raise ValueError(f"architecture mismatch {src.layer_dims} vs {dst.layer_dims}")
    if src.out_kind != dst.out_kind or not np.array_equal(src.out_scale, dst.out_scale):
        raise ValueError("output activation mismatch")
    return clone(src)


def network_to_dict(mlp: Mlp) -> dict:
    scale = mlp.out_scale
    return {
        "layer_dims": list(mlp.layer_dims),
        "hidden_activation": HIDDEN,
        "output_activation": {
            "kind": mlp.out_kind,
            "scale": scale.tolist() if isinstance(scale, np.ndarray) else scale,
        },
        "weights": [w.tolist() for w in mlp.weights],
        "biases": [b.tolist() for b in mlp.biases],
    }


def network_from_dict(payload: dict) -> Mlp:
    out = payload["output_activation"]
    scale = out["scale"]
    return Mlp(
        layer_dims=tuple(int(d) for d in payload["layer_dims"]),
        weights=[np.array(w, dtype=np.float64) for w in payload["weights"]],
        biases=[np.array(b, dtype=np.float64) for b in payload["biases"]],
        out_kind=out["kind"],
        out_scale=np.asarray(scale, dtype=np.float64)
        if isinstance(scale, list)
        else float(scale),
    )


def save_network(path: str, mlp: Mlp) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(mlp), fh)


def load_network(path: str) -> Mlp:
    with open(path) as fh:
        return network_from_dict(json.load(fh))
