"""
Small fully connected networks with hand-written forward and backward passes.

Weights are stored `(n_in, n_out)` so a batch of row vectors maps as `x @ W + b`. Hidden
layers always apply ReLU; the last layer applies it only when `final_relu` is set.
"""

import numpy as np

from ..prelude import *

HIDDEN_WIDTH = 25
HIDDEN_LAYERS = 3


def decoder_dims(channels: int) -> List[int]:
    """
    Decoder input is `[c pyramid features, wi.x, wi.y, wo.x, wo.y]`, output is RGB.
    """
    return [channels + 4] + [HIDDEN_WIDTH] * HIDDEN_LAYERS + [3]


def offset_mlp_dims(channels: int) -> List[int]:
    """
    Offset MLP input is `[c2 offset features, wo.x, wo.y]`; the output is one ray depth.
    """
    return [channels + 2] + [HIDDEN_WIDTH] * HIDDEN_LAYERS + [1]


@dataclass
class Mlp:
    layer_dims: List[int]
    weights: List[FloatArray]
    biases: List[FloatArray]
    final_relu: bool

    def __post_init__(self) -> None:
        if len(self.layer_dims) < 2 or any(n < 1 for n in self.layer_dims):
            raise ContractViolation("bad layer dimensions", dims=self.layer_dims)

        n_layers = len(self.layer_dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ContractViolation(
                "wrong number of parameter blocks",
                layers=n_layers,
                weights=len(self.weights),
                biases=len(self.biases),
            )

        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            n_in, n_out = self.layer_dims[i], self.layer_dims[i + 1]
            if w.shape != (n_in, n_out) or b.shape != (n_out,):
                raise ContractViolation(
                    "parameter block has the wrong shape",
                    layer=i,
                    weight_shape=w.shape,
                    bias_shape=b.shape,
                    expected=(n_in, n_out),
                )

    @property
    def n_in(self) -> int:
        return self.layer_dims[0]

    @property
    def n_out(self) -> int:
        return self.layer_dims[-1]

    @classmethod
    def zeros(cls, layer_dims: Sequence[int], final_relu: bool) -> "Mlp":
        dims = list(layer_dims)
        return cls(
            layer_dims=dims,
            weights=[np.zeros((a, b)) for a, b in zip(dims, dims[1:])],
            biases=[np.zeros(b) for b in dims[1:]],
            final_relu=final_relu,
        )

    def param_count(self) -> int:
        return param_count(self)

    def copy(self) -> "Mlp":
        return Mlp(
            layer_dims=list(self.layer_dims),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            final_relu=self.final_relu,
        )

    def blocks(self, prefix: str) -> List[Tuple[str, FloatArray]]:
        """
        Named views of every parameter array, in serialization order.
        """
        out: List[Tuple[str, FloatArray]] = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}.w{i}", w))
            out.append((f"{prefix}.b{i}", b))
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for _, a in self.blocks(""))

    def set_constant_output(self, value: Sequence[float]) -> None:
        """
        Zeroes the last layer's weights and sets its bias to `value`, so the network
        maps every input to `value` (after the final ReLU, if any). Hidden layers are
        left as they are.
        """
        b = np.asarray(value, dtype=np.float64)
        if b.shape != (self.n_out,):
            raise ContractViolation(
                "constant output has the wrong size", expected=self.n_out, shape=b.shape
            )
        self.weights[-1][...] = 0.0
        self.biases[-1][...] = b


def param_count(m: Mlp) -> int:
    return sum((a + 1) * b for a, b in zip(m.layer_dims, m.layer_dims[1:]))


def mlp_init(layer_dims: Sequence[int], final_relu: bool, seed: int) -> Mlp:
    """
    Fan-in scaled uniform weights in ±sqrt(6 / n_in), zero biases.
    """
    rng = np.random.default_rng(seed)
    m = Mlp.zeros(layer_dims, final_relu)
    for w in m.weights:
        bound = math.sqrt(6.0 / w.shape[0])
        w[:] = rng.uniform(-bound, bound, size=w.shape)
    return m


@dataclass
class MlpCache:
    inputs: List[FloatArray]
    pre_activations: List[FloatArray]


@dataclass
class MlpGrads:
    weights: List[FloatArray]
    biases: List[FloatArray]

    @classmethod
    def zeros_like(cls, m: Mlp) -> "MlpGrads":
        return cls(
            weights=[np.zeros_like(w) for w in m.weights],
            biases=[np.zeros_like(b) for b in m.biases],
        )

    def add_(self, other: "MlpGrads") -> None:
        for a, b in zip(self.weights, other.weights):
            a += b
        for a, b in zip(self.biases, other.biases):
            a += b

    def blocks(self, prefix: str) -> List[Tuple[str, FloatArray]]:
        out: List[Tuple[str, FloatArray]] = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}.w{i}", w))
            out.append((f"{prefix}.b{i}", b))
        return out


def _affine(x: FloatArray, w: FloatArray, b: FloatArray) -> FloatArray:
    # one input at a time: an output row is bit-identical whatever batch it is in
    out = np.empty((x.shape[0], w.shape[1]))
    out[:] = b
    for i in range(w.shape[0]):
        out += x[:, i : i + 1] * w[i]
    return out


def _applies_relu(m: Mlp, layer: int) -> bool:
    return layer < len(m.weights) - 1 or m.final_relu


def mlp_forward_batch(m: Mlp, x: FloatArray) -> Tuple[FloatArray, MlpCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != m.n_in:
        raise ContractViolation(
            "MLP input has the wrong dimension", expected=m.n_in, shape=x.shape
        )

    cache = MlpCache(inputs=[], pre_activations=[])
    h = x
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        cache.inputs.append(h)
        z = _affine(h, w, b)
        cache.pre_activations.append(z)
        h = np.maximum(z, 0.0) if _applies_relu(m, i) else z
    return h, cache


def mlp_forward(m: Mlp, x: Sequence[float]) -> Tuple[FloatArray, MlpCache]:
    out, cache = mlp_forward_batch(m, np.asarray(x, dtype=np.float64).reshape(1, -1))
    return out[0], cache


def mlp_backward_batch(
    m: Mlp,
    cache: MlpCache,
    upstream: FloatArray,
    grads_out: Optional[MlpGrads] = None,
) -> FloatArray:
    """
    Backpropagates `upstream` (N, n_out) through the cached forward pass.

    Parameter gradients are summed over the batch into `grads_out` when given. Returns
    the (N, n_in) input gradient. The ReLU subgradient at 0 is 0.
    """
    d = np.asarray(upstream, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] != m.n_out:
        raise ContractViolation(
            "MLP upstream gradient has the wrong dimension",
            expected=m.n_out,
            shape=d.shape,
        )

    for i in reversed(range(len(m.weights))):
        z = cache.pre_activations[i]
        if _applies_relu(m, i):
            d = np.where(z > 0, d, 0.0)

        if grads_out is not None:
            grads_out.weights[i] += cache.inputs[i].T @ d
            grads_out.biases[i] += np.sum(d, axis=0)

        d = d @ m.weights[i].T
    return d


def mlp_backward(
    m: Mlp, cache: MlpCache, upstream: Sequence[float]
) -> Tuple[MlpGrads, FloatArray]:
    grads = MlpGrads.zeros_like(m)
    dx = mlp_backward_batch(
        m, cache, np.asarray(upstream, dtype=np.float64).reshape(1, -1), grads
    )
    return grads, dx[0]
