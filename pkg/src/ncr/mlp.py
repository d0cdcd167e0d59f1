"""Small fully connected networks with exact manual gradients.

Batched affine-ReLU chains in float64, with an optional SquarePlus
output activation that keeps predicted radiance positive and smooth.
The backward pass produces gradients for every parameter and for the
network input, so upstream encoders can continue the chain.  A plain
Adam optimizer with bias correction rounds out the training loop.
"""

import math
from dataclasses import dataclass, field

import numpy as np

SQUAREPLUS_B = 4.0


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    output_dim: int
    hidden_layers: int
    hidden_width: int
    output_activation: str = "squareplus"

    def __post_init__(self):
        if min(self.input_dim, self.output_dim) < 1:
            raise ValueError("dims must be >= 1")
        if self.hidden_layers < 0 or (self.hidden_layers > 0 and self.hidden_width < 1):
            raise ValueError("bad hidden shape")
        if self.output_activation not in ("squareplus", "identity"):
            raise ValueError(f"unknown activation {self.output_activation!r}")

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_out, fan_in) of each affine layer, first to last."""
        dims = [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())


def squareplus(x, b: float = SQUAREPLUS_B):
    if b <= 0.0:
        raise ValueError("b must be positive")
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (x + np.sqrt(x * x + b))


def squareplus_grad(x, b: float = SQUAREPLUS_B):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + x / np.sqrt(x * x + b))


@dataclass
class Tape:
    inputs: list = field(default_factory=list)   # affine inputs a_i, first to last
    masks: list = field(default_factory=list)    # ReLU masks, one per hidden layer
    final_z: np.ndarray | None = None


def layer_views(spec: MLPSpec, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """(W, b) views into a flat buffer laid out layer by layer."""
    views = []
    off = 0
    for fan_out, fan_in in spec.layer_shapes():
        W = flat[off:off + fan_out * fan_in].reshape(fan_out, fan_in)
        off += fan_out * fan_in
        views.append((W, flat[off:off + fan_out]))
        off += fan_out
    return views


class MLP:
    def __init__(self, spec: MLPSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        self.params = np.zeros(spec.n_params)
        self.views = layer_views(spec, self.params)
        if rng is not None:
            self._init_weights(rng)

    def _init_weights(self, rng: np.random.Generator) -> None:
        # fan-in uniform init; the last layer starts small so initial
        # predictions sit near the activation's gentle region
        for i, (W, b) in enumerate(self.views):
            bound = math.sqrt(6.0 / W.shape[1])
            W[...] = rng.uniform(-bound, bound, W.shape)
            b[...] = 0.0
            if i == len(self.views) - 1:
                W *= 0.1

    @classmethod
    def from_params(cls, spec: MLPSpec, flat: np.ndarray) -> "MLP":
        net = cls(spec)
        flat = np.asarray(flat, dtype=np.float64).reshape(-1)
        if flat.shape != net.params.shape:
            raise ValueError(f"params length {flat.size} != {net.params.size}")
        net.params[...] = flat
        return net

    @property
    def n_params(self) -> int:
        return self.params.size

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Tape]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.spec.input_dim:
            raise ValueError(f"input dim {x.shape[1]} != {self.spec.input_dim}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite network input")
        tape = Tape()
        a = x
        last = len(self.views) - 1
        for i, (W, b) in enumerate(self.views):
            tape.inputs.append(a)
            z = a @ W.T + b
            if i < last:
                tape.masks.append(z > 0.0)
                a = np.maximum(z, 0.0)
            else:
                tape.final_z = z
        if self.spec.output_activation == "squareplus":
            return squareplus(tape.final_z), tape
        return tape.final_z, tape

    def backward(self, tape: Tape, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradients (flat params, input) for d(sum(upstream * output))."""
        upstream = np.asarray(upstream, dtype=np.float64)
        g = upstream
        if self.spec.output_activation == "squareplus":
            g = g * squareplus_grad(tape.final_z)
        grads = np.zeros_like(self.params)
        grad_views = layer_views(self.spec, grads)
        for i in range(len(self.views) - 1, -1, -1):
            W, _ = self.views[i]
            gW, gb = grad_views[i]
            a = tape.inputs[i]
            gW += g.T @ a
            gb += g.sum(axis=0)
            g = g @ W
            if i > 0:
                g = g * tape.masks[i - 1]
        return grads, g


@dataclass
class AdamState:
    shape: tuple
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    skips: int = 0

    def __post_init__(self):
        self.m = np.zeros(self.shape)
        self.v = np.zeros(self.shape)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> bool:
    """In-place Adam update; skips (and counts) non-finite gradients."""
    if params.shape != state.m.shape or grads.shape != state.m.shape:
        raise ValueError("shape mismatch with optimizer state")
    if not np.all(np.isfinite(grads)):
        state.skips += 1
        return False
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * np.square(grads)
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return True


def adam_step_rows(params: np.ndarray, rows: np.ndarray, grads: np.ndarray,
                   state: AdamState) -> bool:
    """Lazy Adam over the touched rows of a large table.

    Rows absent from `rows` keep stale moments (their decay is deferred to
    the next step that touches them); bias correction uses the global step
    count.  With rows = arange(n) this reproduces adam_step exactly.  The
    laziness keeps per-step cost proportional to the active rows, which is
    what makes grid training affordable on a CPU.
    """
    if params.shape != state.m.shape:
        raise ValueError("shape mismatch with optimizer state")
    rows = np.asarray(rows, dtype=np.int64)
    if grads.shape != (rows.size,) + params.shape[1:]:
        raise ValueError("row gradients do not match the touched rows")
    if not np.all(np.isfinite(grads)):
        state.skips += 1
        return False
    state.t += 1
    if rows.size == 0:
        return True
    m = state.beta1 * state.m[rows] + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v[rows] + (1.0 - state.beta2) * np.square(grads)
    state.m[rows] = m
    state.v[rows] = v
    m_hat = m / (1.0 - state.beta1**state.t)
    v_hat = v / (1.0 - state.beta2**state.t)
    params[rows] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return True
