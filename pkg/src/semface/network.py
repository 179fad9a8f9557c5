"""Network assembly: shape inference, parameter initialisation, forward and
backward traversal of a layer stack, and a finite-difference gradient checker."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .layers import (
    LCN,
    OUTPUT_SPECS,
    PARAM_SPECS,
    Conv,
    Dropout,
    FullyConnected,
    MaxPool,
    OutputBlockSoftmax,
    OutputLinear,
    OutputSoftmax,
    ReLU,
)
from .losses import block_nll_loss, mse_loss, nll_loss
from .tensor import DTYPE, DimensionError, ParameterError, SeededRng, rng_uniform

DROPOUT_STREAM = 10_000


class ArchitectureError(ValueError):
    """A layer stack that does not fit its input shape."""


class LayerError(RuntimeError):
    """Failure inside one layer of a forward/backward traversal."""

    def __init__(self, index, spec, exc):
        super().__init__(f"layer {index} ({spec}): {exc}")
        self.index = index
        self.spec = spec


def infer_shapes(specs, input_shape):
    """Per-layer output shapes for a stack applied to one (channels, h, w) sample."""
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise ArchitectureError(f"input shape must be (channels, h, w), got {input_shape}")
    shape = tuple(int(s) for s in input_shape)
    shapes = []
    for i, spec in enumerate(specs):
        spatial = len(shape) == 3
        if isinstance(spec, Conv):
            if not spatial:
                raise ArchitectureError(f"layer {i} ({spec}) needs a spatial input, got {shape}")
            c, h, w = shape
            oh = (h - spec.kernel_h) // spec.stride + 1
            ow = (w - spec.kernel_w) // spec.stride + 1
            if spec.kernel_h > h or spec.kernel_w > w or oh < 1 or ow < 1:
                raise ArchitectureError(f"layer {i} ({spec}): kernel exceeds {h}x{w} input")
            shape = (spec.maps, oh, ow)
        elif isinstance(spec, MaxPool):
            if not spatial:
                raise ArchitectureError(f"layer {i} ({spec}) needs a spatial input, got {shape}")
            c, h, w = shape
            if spec.kernel > h or spec.kernel > w:
                raise ArchitectureError(f"layer {i} ({spec}): kernel exceeds {h}x{w} input")
            shape = (c, -(-(h - spec.kernel) // spec.stride) + 1, -(-(w - spec.kernel) // spec.stride) + 1)
        elif isinstance(spec, LCN):
            if not spatial:
                raise ArchitectureError(f"layer {i} ({spec}) needs a spatial input, got {shape}")
        elif isinstance(spec, (ReLU, Dropout)):
            pass
        elif isinstance(spec, FullyConnected):
            shape = (spec.units,)
        elif isinstance(spec, OUTPUT_SPECS):
            if i != len(specs) - 1:
                raise ArchitectureError(f"layer {i} ({spec}): output head must be the last layer")
            shape = (spec.units,)
        else:
            raise ArchitectureError(f"layer {i}: unknown spec {spec!r}")
        shapes.append(shape)
    return shapes


def spatial_sizes(specs, input_shape):
    """Spatial extent after every conv and pooling layer, e.g. [44, 22, 18, 15]."""
    return [s[1] for spec, s in zip(specs, infer_shapes(specs, input_shape)) if isinstance(spec, (Conv, MaxPool))]


def default_specs(classes=7, head=None, dropout=0.2):
    """The best FER network: conv64-5 / LCN / pool3s2 / conv64-5 / conv128-4 / fc3072 / dropout."""
    return [
        Conv(64, 5, 5, 1), ReLU(), LCN(), MaxPool(3, 2),
        Conv(64, 5, 5, 1), ReLU(),
        Conv(128, 4, 4, 1), ReLU(),
        FullyConnected(3072), ReLU(), Dropout(dropout),
        head if head is not None else OutputSoftmax(classes),
    ]


# conv stack of the default network; extra depth repeats the middle layer
BASE_CONVS = ((64, 5), (64, 5), (128, 4))
BASE_FC = 3072


def _mask(mask, depth, name):
    if mask is None:
        return [i == 0 for i in range(depth)]
    if len(mask) != depth or set(mask) - {"0", "1"}:
        raise ParameterError(f"{name} must be a 0/1 string of length {depth} (one flag per conv layer), got {mask!r}")
    return [c == "1" for c in mask]


def stack_specs(head, depth=3, width=1.0, lcn_mask=None, pool_mask=None, dropout_fc=0.2, dropout_conv=0.0):
    """Layer list for the sweep family around the default network.

    ``depth`` conv layers: conv-1, then copies of conv-2 (so depth 2 drops it),
    then the last conv; the FC layer always comes last. ``width`` scales every
    map and unit count. Masks carry one flag per conv layer and default to
    LCN and pooling after conv-1 only. The defaults reproduce ``default_specs``.
    """
    if not 1 <= depth <= 8:
        raise ParameterError(f"depth must lie in 1..8, got {depth}")
    if not width > 0:
        raise ParameterError(f"width must be positive, got {width}")
    first, middle, last = BASE_CONVS
    convs = [first] if depth == 1 else [first] + [middle] * (depth - 2) + [last]
    lcn, pool = _mask(lcn_mask, depth, "lcn_placement"), _mask(pool_mask, depth, "pool_placement")
    specs = []
    for i, (maps, k) in enumerate(convs):
        specs += [Conv(max(1, round(maps * width)), k, k, 1), ReLU()]
        if lcn[i]:
            specs.append(LCN())
        if pool[i]:
            specs.append(MaxPool(3, 2))
        if dropout_conv > 0:
            specs.append(Dropout(dropout_conv))
    specs += [FullyConnected(max(1, round(BASE_FC * width))), ReLU()]
    if dropout_fc > 0:
        specs.append(Dropout(dropout_fc))
    specs.append(head)
    return specs


@dataclass
class NetworkState:
    specs: list
    input_shape: tuple
    weights: list
    biases: list
    momentum_w: list
    momentum_b: list
    seed: int = 0
    mode: str = "train"
    rng: SeededRng = field(default=None, repr=False)

    def __post_init__(self):
        if self.rng is None:
            self.rng = SeededRng(self.seed).spawn(DROPOUT_STREAM)

    @property
    def head(self):
        return self.specs[-1]

    @property
    def dtype(self):
        for w in self.weights:
            if w is not None:
                return w.dtype
        return np.dtype(DTYPE)

    def param_layers(self):
        return [i for i, w in enumerate(self.weights) if w is not None]

    def shapes(self):
        return infer_shapes(self.specs, self.input_shape)

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        net = self.copy()
        cast = lambda xs: [None if a is None else a.astype(dtype) for a in xs]  # noqa: E731
        net.weights, net.biases = cast(net.weights), cast(net.biases)
        net.momentum_w, net.momentum_b = cast(net.momentum_w), cast(net.momentum_b)
        return net

    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases) if w is not None)


def _fan(spec, in_shape):
    if isinstance(spec, Conv):
        k = spec.kernel_h * spec.kernel_w
        return (spec.maps, in_shape[0], spec.kernel_h, spec.kernel_w), in_shape[0] * k, spec.maps * k
    n_in = int(np.prod(in_shape))
    return (spec.units, n_in), n_in, spec.units


def build_network(specs, input_shape, seed=0):
    """Glorot-uniform weights, zero biases; layer i draws from stream (seed, i)."""
    specs = list(specs)
    shapes = infer_shapes(specs, input_shape)
    if not specs or not isinstance(specs[-1], OUTPUT_SPECS):
        raise ArchitectureError("the last layer must be an output head")
    root = SeededRng(seed)
    weights, biases = [], []
    in_shape = tuple(input_shape)
    for i, spec in enumerate(specs):
        if isinstance(spec, PARAM_SPECS):
            wshape, fan_in, fan_out = _fan(spec, in_shape)
            limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
            weights.append(rng_uniform(root.spawn(i), -limit, limit, wshape))
            biases.append(np.zeros(wshape[0], dtype=DTYPE))
        else:
            weights.append(None)
            biases.append(None)
        in_shape = shapes[i]
    zeros = lambda xs: [None if a is None else np.zeros_like(a) for a in xs]  # noqa: E731
    return NetworkState(specs, tuple(input_shape), weights, biases, zeros(weights), zeros(biases), seed=seed)


def default_net(input_size=48, classes=7, seed=0, head=None, dropout=0.2):
    return build_network(default_specs(classes, head, dropout), (1, input_size, input_size), seed)


def network_forward(net: NetworkState, batch):
    """Returns (predictions, cache). Predictions are head outputs (probabilities
    or raw vectors); the cache feeds ``network_backward``."""
    x = np.asarray(batch, dtype=net.dtype)
    if x.shape[1:] != tuple(net.input_shape):
        raise DimensionError(f"batch shape {x.shape} does not match network input {net.input_shape}")
    cache = []
    for i, spec in enumerate(net.specs):
        try:
            x, entry = _layer_forward(net, i, spec, x)
        except (DimensionError, ParameterError, ValueError) as exc:
            raise LayerError(i, spec, exc) from exc
        cache.append(entry)
    return x, cache


def _layer_forward(net, i, spec, x):
    w, b = net.weights[i], net.biases[i]
    if isinstance(spec, Conv):
        out, cols = L.conv_forward_cols(x, w, b, spec.stride)
        return out, (x, cols)
    if isinstance(spec, MaxPool):
        out, arg = L.maxpool_forward(x, spec.kernel, spec.stride)
        return out, (x.shape, arg)
    if isinstance(spec, LCN):
        return L.lcn_forward(x, spec.window, spec.floor, spec.sigma), x
    if isinstance(spec, ReLU):
        return L.relu_forward(x), x
    if isinstance(spec, Dropout):
        out, mask = L.dropout_forward(x, spec.p, net.mode, net.rng)
        return out, mask
    if isinstance(spec, FullyConnected) or isinstance(spec, OUTPUT_SPECS):
        flat = x.reshape(x.shape[0], -1)
        z = L.fc_forward(flat, w, b)
        if isinstance(spec, OUTPUT_SPECS):
            return L.output_forward(z, spec), (flat, x.shape, z)
        return z, (flat, x.shape, None)
    raise ArchitectureError(f"layer {i}: unknown spec {spec!r}")


def network_backward(net: NetworkState, cache, grad_logits):
    """Reverse traversal. ``grad_logits`` is dLoss/d(output-layer logits).

    Returns ``(grad_weights, grad_biases)`` lists aligned with ``net.weights``.
    """
    gw = [None] * len(net.specs)
    gb = [None] * len(net.specs)
    g = grad_logits
    for i in range(len(net.specs) - 1, -1, -1):
        spec, entry = net.specs[i], cache[i]
        if g is None:
            break
        try:
            if isinstance(spec, Conv):
                x, cols = entry
                g, gw[i], gb[i] = L.conv_backward(x, net.weights[i], g, spec.stride, cols=cols, need_input_grad=i > 0)
            elif isinstance(spec, MaxPool):
                shape, arg = entry
                g = L.maxpool_backward(arg, g, shape)
            elif isinstance(spec, LCN):
                g = L.lcn_backward(entry, g, spec.window, spec.floor, spec.sigma)
            elif isinstance(spec, ReLU):
                g = L.relu_backward(entry, g)
            elif isinstance(spec, Dropout):
                g = L.dropout_backward(entry, spec.p, g)
            else:
                flat, in_shape, _ = entry
                g, gw[i], gb[i] = L.fc_backward(flat, net.weights[i], g)
                g = g.reshape(in_shape)
        except (DimensionError, ParameterError, ValueError) as exc:
            raise LayerError(i, spec, exc) from exc
    return gw, gb


def predict(net: NetworkState, batch, batch_size=100):
    """Eval-mode forward in chunks; the net's mode is restored afterwards."""
    prev = net.mode
    net.mode = "eval"
    try:
        outs = [network_forward(net, batch[s : s + batch_size])[0] for s in range(0, len(batch), batch_size)]
    finally:
        net.mode = prev
    return np.concatenate(outs, axis=0)


def head_loss(head, preds, targets):
    if isinstance(head, OutputSoftmax):
        return nll_loss(preds, targets)
    if isinstance(head, OutputBlockSoftmax):
        return block_nll_loss(preds, targets, head.block_sizes)
    if isinstance(head, OutputLinear):
        return mse_loss(preds, targets)
    raise ParameterError(f"not an output head: {head!r}")


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: dict  # parameter name -> max relative error
    tolerance: float
    checked: dict = field(default_factory=dict)  # parameter name -> entries compared
    skipped: dict = field(default_factory=dict)  # parameter name -> entries whose probe crossed a kink

    @property
    def failures(self):
        return [name for name, err in self.errors.items() if not err < self.tolerance]

    @property
    def passed(self):
        return not self.failures

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    def failing_layers(self):
        return sorted({int(name.split(".")[0][5:]) for name in self.failures})


def kink_signature(net, cache):
    """Discrete state of every non-smooth op in a forward pass: ReLU signs,
    pooling winners and the LCN divisor branch."""
    sig = []
    for spec, entry in zip(net.specs, cache):
        if isinstance(spec, ReLU):
            sig.append(entry > 0)
        elif isinstance(spec, MaxPool):
            sig.append(entry[1])
        elif isinstance(spec, LCN):
            _, _, _, sd, sd_mean, _ = L._lcn_parts(entry, spec.window, spec.floor, spec.sigma)
            sig.append(sd >= sd_mean[:, None, None])
            sig.append(np.maximum(sd, sd_mean[:, None, None]) >= spec.floor)
    return sig


def _same_signature(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def gradient_check(net, batch, targets, tolerance=1e-3, step=1e-3, max_checks=None, seed=0):
    """Central differences in float64 against ``network_backward``.

    Dropout masks are frozen by rewinding the net's RNG before every forward.
    A probe whose +/- step changes the kink signature (a ReLU sign, a pooling
    winner, the LCN branch) is not comparable and is counted in ``skipped``.
    ``max_checks`` bounds the probed entries per parameter tensor (random
    subset, seeded); ``None`` probes all of them.
    """
    net64 = net.astype(np.float64)
    x = np.asarray(batch, dtype=np.float64)
    state = net64.rng.get_state()

    def run():
        net64.rng.set_state(state)
        preds, cache = network_forward(net64, x)
        return preds, cache

    def probe():
        preds, cache = run()
        return head_loss(net64.head, preds, targets)[0], kink_signature(net64, cache)

    preds, cache = run()
    base_sig = kink_signature(net64, cache)
    _, glog = head_loss(net64.head, preds, targets)
    gws, gbs = network_backward(net64, cache, glog)

    pick = np.random.default_rng(seed)
    errors, checked, skipped = {}, {}, {}
    for i in net64.param_layers():
        for kind, param, grad in (("weight", net64.weights[i], gws[i]), ("bias", net64.biases[i], gbs[i])):
            name = f"layer{i}.{type(net64.specs[i]).__name__}.{kind}"
            flat, gflat = param.reshape(-1), grad.reshape(-1)
            idx = np.arange(flat.size)
            if max_checks is not None and flat.size > max_checks:
                idx = np.sort(pick.choice(flat.size, size=max_checks, replace=False))
            worst, n_ok, n_skip = 0.0, 0, 0
            for j in idx:
                orig = flat[j]
                flat[j] = orig + step
                fp, sp = probe()
                flat[j] = orig - step
                fm, sm = probe()
                flat[j] = orig
                if not (_same_signature(sp, base_sig) and _same_signature(sm, base_sig)):
                    n_skip += 1
                    continue
                num = (fp - fm) / (2 * step)
                ana = float(gflat[j])
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
                n_ok += 1
            errors[name] = worst
            checked[name] = n_ok
            skipped[name] = n_skip
    return GradCheckReport(errors, tolerance, checked, skipped)
