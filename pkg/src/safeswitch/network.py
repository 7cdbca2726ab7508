"""Sine-activated value network with exact input and parameter gradients.

The network represents a scalar field B(x, t).  Training losses need not
only B but also its input gradient (the residual of the safety PDE contains
dB/dt and dB/dx), and then the gradient of that loss with respect to the
weights.  Rather than generic higher-order autodiff, this module runs an
*extended* forward pass that carries (activation, input-Jacobian) pairs
through every layer, and a reverse pass over that extended computation.
Both passes are plain ndarray algebra, deterministic, and exact up to
floating point.

Internally a layer's state is a carry tensor C of shape (batch, 1 + n_in,
width): row 0 holds the activations, rows 1..n_in hold the transposed
input-Jacobian.  Both transform through a layer by the same matrix product,
so each layer costs one large GEMM forward and two backward.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Normalization",
    "CbvfNetwork",
    "EvalBundle",
    "ParamGrads",
    "forward",
    "forward_with_input_grads",
    "loss_param_grad",
    "init_weights",
    "save_weights",
    "load_weights",
    "WeightFileError",
    "WeightVersionError",
    "WeightFileTruncatedError",
    "WeightShapeError",
]

WEIGHT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Normalization:
    """Affine input map to [-1, 1] per dimension plus an output scale.

    x_hat = in_scale * (x, t) + in_offset; B = out_scale * raw(x_hat).
    """

    in_scale: np.ndarray
    in_offset: np.ndarray
    out_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "in_scale", np.asarray(self.in_scale, dtype=float))
        object.__setattr__(self, "in_offset", np.asarray(self.in_offset, dtype=float))
        if np.any(self.in_scale == 0.0) or self.out_scale == 0.0:
            raise ValueError("normalization must be invertible")

    @staticmethod
    def identity(n_in: int) -> "Normalization":
        return Normalization(np.ones(n_in), np.zeros(n_in), 1.0)

    @staticmethod
    def from_box(lo: Sequence[float], hi: Sequence[float], horizon: float,
                 out_scale: float = 1.0) -> "Normalization":
        """Map a state box and the time interval [0, horizon] to [-1, 1]."""
        lo = np.asarray(list(lo) + [0.0], dtype=float)
        hi = np.asarray(list(hi) + [horizon], dtype=float)
        scale = 2.0 / (hi - lo)
        offset = -(hi + lo) / (hi - lo)
        return Normalization(scale, offset, out_scale)


@dataclass(frozen=True)
class CbvfNetwork:
    """Fully connected sine network for B(x, t); input dim = state_dim + 1."""

    layer_sizes: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    omega0: float
    normalization: Normalization

    def __post_init__(self):
        sizes = self.layer_sizes
        if len(sizes) < 2 or sizes[-1] != 1:
            raise ValueError("network must end in a single scalar output")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("weight count does not match layer sizes")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[k + 1], sizes[k]) or b.shape != (sizes[k + 1],):
                raise ValueError(f"layer {k}: weight shape {w.shape} inconsistent")
        if self.normalization.in_scale.shape != (sizes[0],):
            raise ValueError("normalization dimension does not match input layer")

    @property
    def state_dim(self) -> int:
        return self.layer_sizes[0] - 1

    def parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def with_parameters(self, params: Sequence[np.ndarray]) -> "CbvfNetwork":
        n = len(self.weights)
        weights = tuple(np.asarray(params[2 * k]) for k in range(n))
        biases = tuple(np.asarray(params[2 * k + 1]) for k in range(n))
        return CbvfNetwork(self.layer_sizes, weights, biases, self.omega0, self.normalization)

    def with_normalization(self, normalization: Normalization) -> "CbvfNetwork":
        return CbvfNetwork(self.layer_sizes, self.weights, self.biases, self.omega0, normalization)


@dataclass(frozen=True)
class EvalBundle:
    """Value with its exact input gradient, split into state and time parts."""

    value: np.ndarray   # (...,)
    grad_x: np.ndarray  # (..., state_dim)
    grad_t: np.ndarray  # (...,)


@dataclass
class ParamGrads:
    """Gradient of a scalar loss w.r.t. every weight and bias."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def _pack_inputs(net: CbvfNetwork, x: np.ndarray, t) -> tuple[np.ndarray, tuple[int, ...]]:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.state_dim:
        raise ValueError(f"state dim {x.shape[-1]} != network state dim {net.state_dim}")
    t_arr = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
    inp = np.concatenate([x, t_arr[..., None]], axis=-1)
    lead = inp.shape[:-1]
    return inp.reshape(-1, net.layer_sizes[0]), lead


def _forward_raw(net: CbvfNetwork, xh: np.ndarray) -> np.ndarray:
    a = xh
    w0 = net.omega0
    for k in range(len(net.weights) - 1):
        a = np.sin(w0 * (a @ net.weights[k].T + net.biases[k]))
    return a @ net.weights[-1].T + net.biases[-1]


def forward(net: CbvfNetwork, x: np.ndarray, t) -> np.ndarray:
    """Evaluate B(x, t); deterministic, bit-identical for identical inputs.

    Accepts a single state (n,) with scalar t, or batches with leading axes.
    Inputs outside the normalized box extrapolate smoothly (the sine layers
    are entire functions); no domain check is enforced here.
    """
    flat, lead = _pack_inputs(net, x, t)
    xh = net.normalization.in_scale * flat + net.normalization.in_offset
    raw = _forward_raw(net, xh)[:, 0]
    out = net.normalization.out_scale * raw
    return out.reshape(lead) if lead else float(out[0])


def _extended_forward(net: CbvfNetwork, xh: np.ndarray):
    """Carry (activations, input-Jacobian) through the layers.

    Returns the raw value (B,), raw gradient w.r.t. normalized input (B, J),
    and the per-layer stash needed by the reverse pass.
    """
    B, J = xh.shape
    w0 = net.omega0
    carry = np.empty((B, 1 + J, J))
    carry[:, 0, :] = xh
    carry[:, 1:, :] = np.eye(J)
    stash = []
    for k in range(len(net.weights) - 1):
        W, bvec = net.weights[k], net.biases[k]
        no = W.shape[0]
        Z = (carry.reshape(-1, carry.shape[-1]) @ W.T).reshape(B, 1 + J, no)
        z = Z[:, 0, :] + bvec
        P = Z[:, 1:, :]
        c = w0 * np.cos(w0 * z)
        new_carry = np.empty((B, 1 + J, no))
        new_carry[:, 0, :] = np.sin(w0 * z)
        new_carry[:, 1:, :] = c[:, None, :] * P
        stash.append((carry, z, P))
        carry = new_carry
    W, bvec = net.weights[-1], net.biases[-1]
    Z = (carry.reshape(-1, carry.shape[-1]) @ W.T).reshape(B, 1 + J, 1)
    value_raw = Z[:, 0, 0] + bvec[0]
    grad_raw = Z[:, 1:, 0]
    stash.append((carry, None, None))
    return value_raw, grad_raw, stash


def forward_with_input_grads(net: CbvfNetwork, x: np.ndarray, t) -> EvalBundle:
    """B(x, t) together with its exact gradient w.r.t. x and t.

    The value equals ``forward`` exactly (same computation); the gradient is
    the analytic chain rule through the sine layers and the normalization.
    """
    flat, lead = _pack_inputs(net, x, t)
    norm = net.normalization
    xh = norm.in_scale * flat + norm.in_offset
    value_raw, grad_raw, _ = _extended_forward(net, xh)
    value = norm.out_scale * value_raw
    grad = norm.out_scale * grad_raw * norm.in_scale
    n = net.state_dim
    if lead:
        return EvalBundle(
            value=value.reshape(lead),
            grad_x=grad[:, :n].reshape(lead + (n,)),
            grad_t=grad[:, n].reshape(lead),
        )
    return EvalBundle(value=float(value[0]), grad_x=grad[0, :n], grad_t=float(grad[0, n]))


def _extended_backward(
    net: CbvfNetwork,
    stash,
    d_value_raw: np.ndarray,
    d_grad_raw: np.ndarray,
) -> ParamGrads:
    """Reverse accumulation over the extended forward computation."""
    B = d_value_raw.shape[0]
    J = net.layer_sizes[0]
    w0 = net.omega0
    n_layers = len(net.weights)

    dW = [np.zeros_like(w) for w in net.weights]
    db = [np.zeros_like(b) for b in net.biases]

    # Final linear layer.
    carry, _, _ = stash[-1]
    S = np.empty((B, 1 + J, 1))
    S[:, 0, 0] = d_value_raw
    S[:, 1:, 0] = d_grad_raw
    dW[-1] = S.reshape(-1, 1).T @ carry.reshape(-1, carry.shape[-1])
    db[-1][0] = float(np.sum(d_value_raw))
    D = (S.reshape(-1, 1) @ net.weights[-1]).reshape(B, 1 + J, -1)

    for k in range(n_layers - 2, -1, -1):
        carry, z, P = stash[k]
        a_bar = D[:, 0, :]
        g_bar = D[:, 1:, :]
        c = w0 * np.cos(w0 * z)
        c_bar = np.sum(g_bar * P, axis=1)
        P_bar = c[:, None, :] * g_bar
        z_bar = a_bar * c - c_bar * (w0 * w0 * np.sin(w0 * z))
        S = np.concatenate([z_bar[:, None, :], P_bar], axis=1)
        dW[k] = S.reshape(-1, S.shape[-1]).T @ carry.reshape(-1, carry.shape[-1])
        db[k] = np.sum(z_bar, axis=0)
        if k > 0:
            D = (S.reshape(-1, S.shape[-1]) @ net.weights[k]).reshape(B, 1 + J, -1)
    return ParamGrads(weights=dW, biases=db)


def loss_param_grad(
    net: CbvfNetwork,
    x: np.ndarray,
    t: np.ndarray,
    loss_fn: Callable,
) -> tuple[float, ParamGrads]:
    """Exact parameter gradient of a scalar batch loss.

    ``loss_fn(value, grad_x, grad_t)`` receives the batch outputs of the
    extended forward pass and must return
    ``(loss, d_value, d_grad_x, d_grad_t)`` -- the scalar loss and its
    partials w.r.t. each output array.  The returned gradient is the exact
    reverse-mode accumulation through both the value and the input-gradient
    computation; results are deterministic for a fixed batch order.
    """
    flat, _ = _pack_inputs(net, x, t)
    if flat.shape[0] == 0:
        return 0.0, ParamGrads(
            weights=[np.zeros_like(w) for w in net.weights],
            biases=[np.zeros_like(b) for b in net.biases],
        )
    norm = net.normalization
    xh = norm.in_scale * flat + norm.in_offset
    value_raw, grad_raw, stash = _extended_forward(net, xh)

    n = net.state_dim
    value = norm.out_scale * value_raw
    grad_phys = norm.out_scale * grad_raw * norm.in_scale
    loss, d_value, d_grad_x, d_grad_t = loss_fn(
        value, grad_phys[:, :n], grad_phys[:, n]
    )

    d_grad_phys = np.concatenate(
        [np.asarray(d_grad_x, dtype=float), np.asarray(d_grad_t, dtype=float)[:, None]],
        axis=1,
    )
    d_value_raw = np.asarray(d_value, dtype=float) * norm.out_scale
    d_grad_raw = d_grad_phys * (norm.out_scale * norm.in_scale)
    grads = _extended_backward(net, stash, d_value_raw, d_grad_raw)
    return float(loss), grads


def init_weights(
    layer_sizes: Sequence[int],
    omega0: float = 30.0,
    seed: int = 0,
    normalization: Normalization | None = None,
) -> CbvfNetwork:
    """Deterministic periodic-network initialization.

    First layer uniform in [-1/n_in, 1/n_in] (the omega0 factor is applied
    in the forward pass); deeper layers uniform in
    [-sqrt(6/fan_in)/omega0, sqrt(6/fan_in)/omega0].
    """
    sizes = tuple(int(s) for s in layer_sizes)
    rng = np.random.default_rng(seed)
    weights: list[np.ndarray] = []
    biases: list[np.ndarray] = []
    for k in range(len(sizes) - 1):
        fan_in, fan_out = sizes[k], sizes[k + 1]
        if k == 0:
            bound = 1.0 / fan_in
        else:
            bound = np.sqrt(6.0 / fan_in) / omega0
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-1.0, 1.0, size=fan_out) / np.sqrt(fan_in))
    if normalization is None:
        normalization = Normalization.identity(sizes[0])
    return CbvfNetwork(
        layer_sizes=sizes,
        weights=tuple(weights),
        biases=tuple(biases),
        omega0=float(omega0),
        normalization=normalization,
    )


# ---------------------------------------------------------------------------
# Weight persistence
# ---------------------------------------------------------------------------

class WeightFileError(RuntimeError):
    pass


class WeightVersionError(WeightFileError):
    pass


class WeightFileTruncatedError(WeightFileError):
    pass


class WeightShapeError(WeightFileError):
    pass


def _encode(arr: np.ndarray) -> str:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes().hex()


def _decode(hexstr: str, shape: tuple[int, ...]) -> np.ndarray:
    try:
        buf = bytes.fromhex(hexstr)
    except ValueError as exc:
        raise WeightFileTruncatedError(f"corrupt float payload: {exc}") from exc
    expected = int(np.prod(shape)) * 8
    if len(buf) != expected:
        raise WeightFileTruncatedError(
            f"truncated file: payload holds {len(buf)} bytes, expected {expected}"
        )
    return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()


def save_weights(net: CbvfNetwork, path) -> None:
    """Write a versioned, self-describing weight file (hex-encoded float64)."""
    doc = {
        "format": "cbvf-weights",
        "schema_version": WEIGHT_SCHEMA_VERSION,
        "layer_sizes": list(net.layer_sizes),
        "omega0": net.omega0,
        "normalization": {
            "in_scale": _encode(net.normalization.in_scale),
            "in_offset": _encode(net.normalization.in_offset),
            "out_scale": _encode(np.array([net.normalization.out_scale])),
        },
        "weights": [_encode(w) for w in net.weights],
        "biases": [_encode(b) for b in net.biases],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_weights(path) -> CbvfNetwork:
    """Load a weight file; round-trips with save_weights bit-exactly."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise WeightFileTruncatedError(f"truncated file: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != "cbvf-weights":
        raise WeightFileError("not a weight file")
    version = doc.get("schema_version")
    if version != WEIGHT_SCHEMA_VERSION:
        raise WeightVersionError(
            f"version mismatch: file schema {version}, supported {WEIGHT_SCHEMA_VERSION}"
        )
    try:
        sizes = tuple(int(s) for s in doc["layer_sizes"])
        omega0 = float(doc["omega0"])
        norm_doc = doc["normalization"]
        weights_hex = doc["weights"]
        biases_hex = doc["biases"]
    except (KeyError, TypeError, ValueError) as exc:
        raise WeightFileTruncatedError(f"missing or malformed field: {exc}") from exc
    if len(weights_hex) != len(sizes) - 1 or len(biases_hex) != len(sizes) - 1:
        raise WeightShapeError(
            f"shape inconsistency: {len(weights_hex)} weight blocks for "
            f"{len(sizes)} layer sizes"
        )
    weights = tuple(
        _decode(weights_hex[k], (sizes[k + 1], sizes[k])) for k in range(len(sizes) - 1)
    )
    biases = tuple(
        _decode(biases_hex[k], (sizes[k + 1],)) for k in range(len(sizes) - 1)
    )
    norm = Normalization(
        in_scale=_decode(norm_doc["in_scale"], (sizes[0],)),
        in_offset=_decode(norm_doc["in_offset"], (sizes[0],)),
        out_scale=float(_decode(norm_doc["out_scale"], (1,))[0]),
    )
    try:
        return CbvfNetwork(
            layer_sizes=sizes,
            weights=weights,
            biases=biases,
            omega0=omega0,
            normalization=norm,
        )
    except ValueError as exc:
        raise WeightShapeError(str(exc)) from exc
