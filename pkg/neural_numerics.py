import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from simulation_errors import ConfigurationError, DomainError, NumericError, ShapeError

logger = logging.getLogger(__name__)

SUPPORTED_ACTIVATIONS = ("linear", "relu", "sigmoid", "scale")

# Sigmoid pre-activations are clipped here so the output stays strictly inside (0, 1)
SIGMOID_CLIP = 30.0


@dataclass(frozen=True)
class Activation:
    """Activation tag of a layer; `factor` is only meaningful for scale layers."""
    name: str
    factor: float = 1.0

    @classmethod
    def parse(cls, tag: Union["Activation", str, Tuple[str, float]]) -> "Activation":
        """
        Build an activation from a tag.

        Args:
            tag: An Activation, a plain name ("relu"), "scale(0.5)" or ("scale", 0.5)

        Returns:
            Parsed Activation
        """
        if isinstance(tag, Activation):
            activation = tag
        elif isinstance(tag, tuple):
            activation = cls(str(tag[0]), float(tag[1]))
        else:
            text = str(tag).strip().lower()
            if text.startswith("scale(") and text.endswith(")"):
                activation = cls("scale", float(text[len("scale("):-1]))
            else:
                activation = cls(text)

        if activation.name not in SUPPORTED_ACTIVATIONS:
            raise ConfigurationError(f"Unsupported activation: {activation.name}")
        if activation.name == "scale" and not (np.isfinite(activation.factor) and activation.factor > 0):
            raise ConfigurationError(f"Scale factor must be positive and finite, got {activation.factor}")
        return activation

    def __str__(self) -> str:
        if self.name == "scale":
            return f"scale({self.factor!r})"
        return self.name


def scale(factor: float) -> Activation:
    """Fixed, non-trainable elementwise scaling by `factor`."""
    return Activation.parse(("scale", factor))


@dataclass
class DenseLayer:
    """One layer: affine map plus activation, or a parameter-free scale layer."""
    activation: Activation
    width_in: int
    width_out: int
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None

    @property
    def trainable(self) -> bool:
        return self.activation.name != "scale"


@dataclass
class Mlp:
    """Dense feed-forward network used for local, actor, critic and target nets."""
    layers: List[DenseLayer]

    @property
    def input_dim(self) -> int:
        return self.layers[0].width_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].width_out

    @property
    def layer_sizes(self) -> List[int]:
        return [self.layers[0].width_in] + [layer.width_out for layer in self.layers]

    @property
    def activations(self) -> List[Activation]:
        return [layer.activation for layer in self.layers]

    def parameters(self) -> List[np.ndarray]:
        """Trainable arrays in layer order: W0, b0, W1, b1, ..."""
        arrays = []
        for layer in self.layers:
            if layer.trainable:
                arrays.extend([layer.weight, layer.bias])
        return arrays

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def copy(self) -> "Mlp":
        return Mlp([
            DenseLayer(
                activation=layer.activation,
                width_in=layer.width_in,
                width_out=layer.width_out,
                weight=None if layer.weight is None else layer.weight.copy(),
                bias=None if layer.bias is None else layer.bias.copy(),
            )
            for layer in self.layers
        ])

    def same_topology(self, other: "Mlp") -> bool:
        return self.layer_sizes == other.layer_sizes and self.activations == other.activations

    def load_parameters_from(self, other: "Mlp") -> None:
        """Overwrite every trainable parameter with a copy of `other`'s."""
        if not self.same_topology(other):
            raise ShapeError("Cannot copy parameters between networks of different topology")
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine[...] = theirs


@dataclass
class ForwardCache:
    """Per-layer inputs, pre-activations and outputs of one forward pass."""
    layer_inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    post_activations: List[np.ndarray]
    batched: bool

    @property
    def depth(self) -> int:
        return len(self.pre_activations)


@dataclass
class MlpGradients:
    """Gradients shaped like an Mlp's trainable parameters (None for scale layers)."""
    weights: List[Optional[np.ndarray]]
    biases: List[Optional[np.ndarray]]

    def arrays(self) -> List[np.ndarray]:
        arrays = []
        for weight, bias in zip(self.weights, self.biases):
            if weight is not None:
                arrays.extend([weight, bias])
        return arrays

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.arrays())


@dataclass
class AdamState:
    """Moment estimates and hyperparameters of one Adam optimizer."""
    first_moment: List[np.ndarray]
    second_moment: List[np.ndarray]
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_stab: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_network(cls, net: Mlp, learning_rate: float, beta1: float = 0.9,
                    beta2: float = 0.999, epsilon_stab: float = 1e-8) -> "AdamState":
        if learning_rate <= 0:
            raise ConfigurationError(f"Adam learning rate must be positive, got {learning_rate}")
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ConfigurationError(f"Adam betas must lie in (0, 1), got {beta1}, {beta2}")
        if epsilon_stab <= 0:
            raise ConfigurationError("Adam epsilon must be positive")
        return cls(
            first_moment=[np.zeros_like(p) for p in net.parameters()],
            second_moment=[np.zeros_like(p) for p in net.parameters()],
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon_stab=epsilon_stab,
        )


def mlp_init(layer_sizes: Sequence[int], activations: Sequence, rng: np.random.Generator) -> Mlp:
    """
    Create a network with Glorot-uniform weights and zero biases.

    Args:
        layer_sizes: Widths from input to output, e.g. [7, 100, 100, 1, 1]
        activations: One tag per layer transition (len(layer_sizes) - 1 entries)
        rng: Seeded random stream

    Returns:
        Initialized Mlp
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ConfigurationError("A network needs at least an input and an output size")
    if len(activations) != len(sizes) - 1:
        raise ConfigurationError(
            f"Got {len(activations)} activations for {len(sizes) - 1} layers"
        )
    if any(s < 1 for s in sizes):
        raise ConfigurationError(f"Layer sizes must be >= 1, got {sizes}")

    layers = []
    for fan_in, fan_out, tag in zip(sizes[:-1], sizes[1:], activations):
        activation = Activation.parse(tag)
        if activation.name == "scale":
            if fan_in != fan_out:
                raise ConfigurationError(f"Scale layer must keep its width, got {fan_in} -> {fan_out}")
            layers.append(DenseLayer(activation, fan_in, fan_out))
            continue
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(DenseLayer(
            activation=activation,
            width_in=fan_in,
            width_out=fan_out,
            weight=rng.uniform(-limit, limit, size=(fan_out, fan_in)),
            bias=np.zeros(fan_out),
        ))
    return Mlp(layers)


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation.name == "linear":
        return z
    if activation.name == "relu":
        return np.maximum(z, 0.0)
    if activation.name == "sigmoid":
        zc = np.clip(z, -SIGMOID_CLIP, SIGMOID_CLIP)
        return 0.5 * (1.0 + np.tanh(0.5 * zc))
    return z * activation.factor


def _activation_slope(z: np.ndarray, out: np.ndarray, activation: Activation) -> np.ndarray:
    if activation.name == "linear":
        return np.ones_like(z)
    if activation.name == "relu":
        return (z > 0.0).astype(float)
    if activation.name == "sigmoid":
        return out * (1.0 - out) * (np.abs(z) < SIGMOID_CLIP)
    return np.full_like(z, activation.factor)


def mlp_forward(net: Mlp, inputs) -> Tuple[np.ndarray, ForwardCache]:
    """
    Run a forward pass on one input vector or a batch of row vectors.

    Args:
        net: Network to evaluate
        inputs: Array of shape (in,) or (batch, in)

    Returns:
        Tuple of (output, cache) where output has shape (out,) or (batch, out)
    """
    x = np.asarray(inputs, dtype=float)
    batched = x.ndim == 2
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_dim:
        raise ShapeError(f"Expected input width {net.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("Network input contains non-finite values")

    current = x if batched else x[np.newaxis, :]
    layer_inputs, pre_activations, post_activations = [], [], []
    for layer in net.layers:
        layer_inputs.append(current)
        if layer.trainable:
            z = current @ layer.weight.T + layer.bias
        else:
            z = current
        out = _activate(z, layer.activation)
        pre_activations.append(z)
        post_activations.append(out)
        current = out

    output = current if batched else current[0]
    return output, ForwardCache(layer_inputs, pre_activations, post_activations, batched)


def mlp_backward(net: Mlp, cache: ForwardCache, output_gradient) -> Tuple[MlpGradients, np.ndarray]:
    """
    Reverse-mode gradients of sum(output * output_gradient).

    Parameter gradients are summed over the batch; the input gradient keeps
    the batch dimension of the forward pass.

    Args:
        net: Network used for the forward pass
        cache: Cache returned by that forward pass
        output_gradient: Upstream gradient, same shape as the output

    Returns:
        Tuple of (parameter gradients, input gradient)
    """
    if cache.depth != len(net.layers):
        raise ShapeError(f"Cache depth {cache.depth} does not match {len(net.layers)} layers")
    grad = np.asarray(output_gradient, dtype=float)
    if not cache.batched:
        grad = grad[np.newaxis, :] if grad.ndim == 1 else grad
    if grad.shape != cache.post_activations[-1].shape:
        raise ShapeError(
            f"Output gradient shape {grad.shape} does not match output {cache.post_activations[-1].shape}"
        )

    weights: List[Optional[np.ndarray]] = [None] * len(net.layers)
    biases: List[Optional[np.ndarray]] = [None] * len(net.layers)
    for index in reversed(range(len(net.layers))):
        layer = net.layers[index]
        layer_input = cache.layer_inputs[index]
        if layer_input.shape[-1] != layer.width_in:
            raise ShapeError(f"Stale cache: layer {index} expects width {layer.width_in}")
        z = cache.pre_activations[index]
        delta = grad * _activation_slope(z, cache.post_activations[index], layer.activation)
        if layer.trainable:
            weights[index] = delta.T @ layer_input
            biases[index] = delta.sum(axis=0)
            grad = delta @ layer.weight
        else:
            grad = delta

    input_gradient = grad if cache.batched else grad[0]
    return MlpGradients(weights, biases), input_gradient


def adam_step(net: Mlp, gradients: MlpGradients, state: AdamState) -> Tuple[Mlp, AdamState]:
    """
    Apply one bias-corrected Adam update to `net` in place.

    Raises NumericError, leaving net and state untouched, when a gradient is
    non-finite; the caller decides whether to skip or abort.
    """
    params = net.parameters()
    grads = gradients.arrays()
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("Gradient/optimizer structure does not match the network")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"Parameter shape {p.shape} does not match gradient {g.shape}")
    if not gradients.is_finite():
        raise NumericError("Non-finite gradient passed to Adam")

    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon_stab)

    if not all(np.all(np.isfinite(p)) for p in params):
        raise NumericError("Adam update produced non-finite parameters")
    return net, state


def soft_update(target: Mlp, online: Mlp, tau: float) -> Mlp:
    """Move every target parameter to tau * online + (1 - tau) * target, in place."""
    if not 0.0 <= tau <= 1.0:
        raise DomainError(f"tau must lie in [0, 1], got {tau}")
    if not target.same_topology(online):
        raise ShapeError("Target and online networks have different topologies")
    for t_param, o_param in zip(target.parameters(), online.parameters()):
        t_param *= (1.0 - tau)
        t_param += tau * o_param
    return target


def gradient_check(net: Mlp, inputs, epsilon: float = 1e-5,
                   sample_size: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> float:
    """
    Compare backprop against central differences of sum(output).

    Args:
        net: Network to check (temporarily perturbed, restored afterwards)
        inputs: Input vector or batch
        epsilon: Finite-difference step in [1e-8, 1e-3]
        sample_size: Check only this many randomly chosen coordinates per array
        rng: Random stream used when sampling coordinates

    Returns:
        max |analytic - numeric| / max(1, |analytic|, |numeric|)
    """
    if not 1e-8 <= epsilon <= 1e-3:
        raise DomainError(f"epsilon must lie in [1e-8, 1e-3], got {epsilon}")
    output, cache = mlp_forward(net, inputs)
    gradients, _ = mlp_backward(net, cache, np.ones_like(output))
    rng = rng or np.random.default_rng(0)

    def objective() -> float:
        return float(np.sum(mlp_forward(net, inputs)[0]))

    worst = 0.0
    for param, analytic in zip(net.parameters(), gradients.arrays()):
        flat_param = param.reshape(-1)
        flat_analytic = analytic.reshape(-1)
        indices = np.arange(flat_param.size)
        if sample_size is not None and sample_size < flat_param.size:
            indices = rng.choice(flat_param.size, size=sample_size, replace=False)
        for i in indices:
            original = flat_param[i]
            flat_param[i] = original + epsilon
            f_plus = objective()
            flat_param[i] = original - epsilon
            f_minus = objective()
            flat_param[i] = original
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = flat_analytic[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst


def mlp_state_dict(net: Mlp, prefix: str = "") -> Dict[str, np.ndarray]:
    """Flatten a network into named arrays with a layer-size/activation header."""
    state = {
        f"{prefix}layer_sizes": np.asarray(net.layer_sizes, dtype=np.int64),
        f"{prefix}activations": np.asarray([a.name for a in net.activations]),
        f"{prefix}scale_factors": np.asarray([a.factor for a in net.activations], dtype=float),
    }
    for index, layer in enumerate(net.layers):
        if layer.trainable:
            state[f"{prefix}W{index}"] = layer.weight
            state[f"{prefix}b{index}"] = layer.bias
    return state


def mlp_from_state_dict(state: Dict[str, np.ndarray], prefix: str = "") -> Mlp:
    """Rebuild a network written by `mlp_state_dict`."""
    try:
        sizes = [int(s) for s in state[f"{prefix}layer_sizes"]]
        names = [str(n) for n in state[f"{prefix}activations"]]
        factors = [float(f) for f in state[f"{prefix}scale_factors"]]
    except KeyError as e:
        raise ShapeError(f"Missing network header {e} in checkpoint") from e

    layers = []
    for index, (fan_in, fan_out, name, factor) in enumerate(zip(sizes[:-1], sizes[1:], names, factors)):
        activation = Activation.parse((name, factor)) if name == "scale" else Activation.parse(name)
        if activation.name == "scale":
            layers.append(DenseLayer(activation, fan_in, fan_out))
            continue
        weight = np.array(state[f"{prefix}W{index}"], dtype=float)
        bias = np.array(state[f"{prefix}b{index}"], dtype=float)
        if weight.shape != (fan_out, fan_in) or bias.shape != (fan_out,):
            raise ShapeError(f"Layer {index} arrays do not match header sizes {fan_in}->{fan_out}")
        layers.append(DenseLayer(activation, fan_in, fan_out, weight, bias))
    return Mlp(layers)


def save_mlp(net: Mlp, path: Union[str, Path]) -> Path:
    """Write a network to an .npz file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **mlp_state_dict(net))
    logger.debug(f"Saved network with {net.parameter_count()} parameters to {path}")
    return path


def load_mlp(path: Union[str, Path]) -> Mlp:
    """Read a network written by `save_mlp`."""
    with np.load(Path(path)) as data:
        return mlp_from_state_dict({key: data[key] for key in data.files})
