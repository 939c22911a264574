"""
Dense network kernel with exact reverse-mode gradients, finite-difference
verification and a decoupled-weight-decay Adam optimizer.

All arithmetic is float64. Inputs may be a single vector (in_dim,) or a batch
(B, in_dim); parameter gradients are summed over the batch in index order.
"""
import copy
from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from app.config import ADAMW_BETAS, ADAMW_EPS, ADAMW_LR, ADAMW_WEIGHT_DECAY
from app.errors import InvalidArgumentError, TrainingDivergedError
from app.utils.prng import PrngState, gaussian

Tensor = npt.NDArray[np.float64]

ACTIVATIONS = ("linear", "gelu", "silu")
_GELU_C = np.sqrt(2.0 / np.pi)


def _activate(pre: Tensor, kind: str) -> Tensor:
    if kind == "linear":
        return pre
    if kind == "silu":
        return pre * (0.5 * (1.0 + np.tanh(0.5 * pre)))
    # tanh approximation of gelu
    u = _GELU_C * (pre + 0.044715 * pre ** 3)
    return 0.5 * pre * (1.0 + np.tanh(u))


def _activate_grad(pre: Tensor, kind: str) -> Tensor:
    if kind == "linear":
        return np.ones_like(pre)
    if kind == "silu":
        sig = 0.5 * (1.0 + np.tanh(0.5 * pre))
        return sig * (1.0 + pre * (1.0 - sig))
    u = _GELU_C * (pre + 0.044715 * pre ** 3)
    th = np.tanh(u)
    return 0.5 * (1.0 + th) + 0.5 * pre * (1.0 - th ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * pre ** 2)


@dataclass
class DenseLayer:
    weight: Tensor  # (out, in)
    bias: Tensor  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise InvalidArgumentError(
                f"layer shapes incompatible: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class DenseNet:
    """
    Ordered dense layers. Each residual group (start, end) adds the input of
    layer `start` to the output of layer `end - 1`.
    """
    layers: List[DenseLayer]
    residual_groups: List[Tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise InvalidArgumentError("network needs at least one layer")
        for i in range(1, len(self.layers)):
            if self.layers[i].in_dim != self.layers[i - 1].out_dim:
                raise InvalidArgumentError(
                    f"layer {i} expects {self.layers[i].in_dim} inputs, previous layer gives {self.layers[i - 1].out_dim}"
                )
        self.residual_groups = sorted((int(s), int(e)) for s, e in self.residual_groups)
        last_end = 0
        for start, end in self.residual_groups:
            if start < last_end or not 0 <= start < end <= len(self.layers):
                raise InvalidArgumentError(f"invalid residual group ({start}, {end})")
            if self.layers[start].in_dim != self.layers[end - 1].out_dim:
                raise InvalidArgumentError(f"residual group ({start}, {end}) changes width")
            last_end = end

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> List[Tensor]:
        """Weight and bias arrays in layer order: [W0, b0, W1, b1, ...]"""
        params: List[Tensor] = []
        for layer in self.layers:
            params.extend((layer.weight, layer.bias))
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "DenseNet":
        return copy.deepcopy(self)


def init_dense_net(
    dims: Sequence[int],
    activations: Sequence[str],
    prng: PrngState,
    residual_groups: Sequence[Tuple[int, int]] = (),
    scale: float = 1.0,
) -> DenseNet:
    """Gaussian weights scaled by 1/sqrt(fan_in), zero biases"""
    if len(activations) != len(dims) - 1:
        raise InvalidArgumentError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        weight = gaussian(prng, (fan_out, fan_in)) * (scale / np.sqrt(fan_in))
        layers.append(DenseLayer(weight, np.zeros(fan_out), act))
    return DenseNet(layers, list(residual_groups))


def residual_block(width: int, hidden: int, activation: str, prng: PrngState) -> DenseNet:
    """x + W2 act(W1 x + b1) + b2"""
    return init_dense_net([width, hidden, width], [activation, "linear"], prng, [(0, 2)])


def zero_dense(in_dim: int, out_dim: int) -> DenseNet:
    """Single linear layer with weight and bias exactly zero"""
    return DenseNet([DenseLayer(np.zeros((out_dim, in_dim)), np.zeros(out_dim), "linear")])


def _check_input(net: DenseNet, x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.in_dim:
        raise InvalidArgumentError(f"input shape {x.shape} does not match network input dim {net.in_dim}")
    return x


def _run(net: DenseNet, x: Tensor):
    starts = {s: e for s, e in net.residual_groups}
    ends = {e - 1 for _, e in net.residual_groups}
    tape = []
    skips = []
    h = x
    for i, layer in enumerate(net.layers):
        if i in starts:
            skips.append(h)
        pre = h @ layer.weight.T + layer.bias
        tape.append((h, pre))
        h = _activate(pre, layer.activation)
        if i in ends:
            h = h + skips.pop()
    return h, tape


def forward(net: DenseNet, x: Tensor) -> Tensor:
    """Deterministic forward pass"""
    out, _ = _run(net, _check_input(net, x))
    return out


def backward(net: DenseNet, x: Tensor, upstream: Tensor) -> Tuple[List[Tensor], Tensor]:
    """
    Exact reverse-mode gradients of <upstream, forward(net, x)>.

    Returns parameter gradients aligned with net.parameters() and the input
    gradient.
    """
    x = _check_input(net, x)
    out, tape = _run(net, x)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != out.shape:
        raise InvalidArgumentError(f"upstream shape {g.shape} does not match output shape {out.shape}")

    starts = {s for s, _ in net.residual_groups}
    ends = {e - 1 for _, e in net.residual_groups}
    grads: List[Tensor] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    skip_grads = []
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        h_in, pre = tape[i]
        if i in ends:
            skip_grads.append(g)
        g_pre = g * _activate_grad(pre, layer.activation)
        if g_pre.ndim == 1:
            grads[2 * i] = np.outer(g_pre, h_in)
            grads[2 * i + 1] = g_pre.copy()
        else:
            grads[2 * i] = g_pre.T @ h_in
            grads[2 * i + 1] = g_pre.sum(axis=0)
        g = g_pre @ layer.weight
        if i in starts:
            g = g + skip_grads.pop()
    return grads, g


def finite_diff_check(
    loss_fn: Callable[[], Tuple[float, List[Tensor]]],
    params: List[Tensor],
    eps: float = 1e-5,
) -> float:
    """
    Compare analytic gradients with central differences.

    loss_fn() evaluates the loss at the current contents of params and returns
    (loss, grads) with grads aligned to params. Each parameter array is
    perturbed in place and restored. Each entry is scored as
    |analytic - numeric| / (|numeric| + 1e-12); the result is the max over
    every entry of every array (0.0 when there are none).
    """
    loss, analytic = loss_fn()
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"loss is not finite: {loss}")
    worst = 0.0
    for p, a in zip(params, analytic):
        if not p.flags.c_contiguous:
            raise InvalidArgumentError("finite differences need C-contiguous parameter arrays")
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            plus, _ = loss_fn()
            flat[j] = orig - eps
            minus, _ = loss_fn()
            flat[j] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise TrainingDivergedError("loss became non-finite during finite differences")
            num_flat[j] = (plus - minus) / (2.0 * eps)
        if numeric.size:
            err = np.abs(np.asarray(a, dtype=np.float64) - numeric) / (np.abs(numeric) + 1e-12)
            worst = max(worst, float(err.max()))
    return worst


@dataclass
class AdamState:
    step: int
    m: List[Tensor]
    v: List[Tensor]

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[Tensor],
    state: AdamState,
    lr: float = ADAMW_LR,
    weight_decay: float = ADAMW_WEIGHT_DECAY,
    betas: Tuple[float, float] = ADAMW_BETAS,
    eps: float = ADAMW_EPS,
) -> Tuple[List[Tensor], AdamState]:
    """One AdamW update; returns new arrays and a new state"""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidArgumentError("params, grads and optimizer state must align")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise InvalidArgumentError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError("non-finite gradient")

    b1, b2 = betas
    step = state.step + 1
    bias1 = 1.0 - b1 ** step
    bias2 = 1.0 - b2 ** step
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        decayed = p - lr * weight_decay * p
        update = (m / bias1) / (np.sqrt(v / bias2) + eps)
        new_params.append(decayed - lr * update)
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(step, new_m, new_v)
