"""From-scratch convolutional encoder-decoder for patch-wise momentum
prediction.

Architecture: two encoder blocks of 3x3 convolutions with PReLU and 2x2/2
max-pooling (indices recorded), followed by one independent decoder per
spatial dimension mirroring the encoder with max-unpooling on the recorded
indices; the last convolution of each decoder has no non-linearity.
Dropout (when enabled) multiplies whole feature maps by Bernoulli(1-p)/(1-p)
after every conv+PReLU unit except each decoder's final convolution.
"""

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import DivergenceError, GeometryMismatchError, InvalidInputError
from .fields import VectorField
from .patches import PatchSpec, assemble, extract, plan_grid, prune


@dataclass(frozen=True)
class NetConfig:
    ndim: int = 2
    patch_size: int = 15
    encoder_features: tuple = (16, 32)   # paper-scale: (128, 256)
    convs_per_block: int = 3
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.ndim not in (2, 3):
            raise InvalidInputError("network dimension must be 2 or 3")
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise InvalidInputError("patch size must be odd and >= 3")
        if min(self.encoder_features) < 1 or self.convs_per_block < 1:
            raise InvalidInputError("feature counts and convs per block must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise InvalidInputError("dropout probability must lie in [0, 1)")

    def layer_channels(self):
        """(in, out, has_activation, has_dropout) per conv, declaration order:
        encoder block 1, encoder block 2, then per decoder coarse + fine."""
        f1, f2 = self.encoder_features
        cpb = self.convs_per_block
        layers = []
        chans = [2] + [f1] * cpb
        for i in range(cpb):
            layers.append((chans[i], chans[i + 1], True, True))
        chans = [f1] + [f2] * cpb
        for i in range(cpb):
            layers.append((chans[i], chans[i + 1], True, True))
        for _ in range(self.ndim):
            chans = [f2] * cpb + [f1]
            for i in range(cpb):
                layers.append((chans[i], chans[i + 1], True, True))
            chans = [f1] * cpb + [1]
            for i in range(cpb):
                last = i == cpb - 1
                layers.append((chans[i], chans[i + 1], not last, not last))
        return layers


@dataclass
class ConvLayer:
    w: np.ndarray           # (out, in, *3^d)
    b: np.ndarray           # (out,)
    slope: np.ndarray = None  # PReLU slope per out feature; None = linear


@dataclass
class NetworkWeights:
    config: NetConfig
    layers: list

    def parameters(self):
        """Flat parameter list in declaration order (w, b[, slope] per layer)."""
        params = []
        for layer in self.layers:
            params.append(layer.w)
            params.append(layer.b)
            if layer.slope is not None:
                params.append(layer.slope)
        return params

    def set_parameters(self, params):
        it = iter(params)
        for layer in self.layers:
            layer.w = next(it)
            layer.b = next(it)
            if layer.slope is not None:
                layer.slope = next(it)


def init_weights(config, rng):
    layers = []
    k = 3 ** config.ndim
    for cin, cout, act, _ in config.layer_channels():
        s = 1.0 / np.sqrt(cin * k)
        w = rng.uniform(-s, s, size=(cout, cin) + (3,) * config.ndim)
        b = rng.uniform(-s, s, size=cout)
        slope = np.full(cout, 0.25) if act else None
        layers.append(ConvLayer(w, b, slope))
    return NetworkWeights(config, layers)


# ---------------------------------------------------------------------------
# primitive layers


def conv(x, w, b):
    """Zero-padded same-size cross-correlation plus bias.

    x: (B, Cin, *spatial); w: (Cout, Cin, *3^d); b: (Cout,)."""
    d = x.ndim - 2
    if w.shape[1] != x.shape[1] or w.shape[2:] != (3,) * d:
        raise InvalidInputError("conv weight shape %s incompatible with input %s"
                                % (w.shape, x.shape))
    spatial = x.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0)) + ((1, 1),) * d)
    out = np.zeros((x.shape[0], w.shape[0]) + spatial)
    for off in product(range(3), repeat=d):
        sl = (slice(None), slice(None)) + tuple(
            slice(o, o + n) for o, n in zip(off, spatial))
        out += np.einsum("oi,bi...->bo...", w[(slice(None), slice(None)) + off],
                         xp[sl])
    return out + b.reshape((1, -1) + (1,) * d)


def conv_backward(x, w, gout):
    """Gradients (gx, gw, gb) of conv at input x with output cotangent gout."""
    d = x.ndim - 2
    spatial = x.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0)) + ((1, 1),) * d)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for off in product(range(3), repeat=d):
        sl = (slice(None), slice(None)) + tuple(
            slice(o, o + n) for o, n in zip(off, spatial))
        woff = (slice(None), slice(None)) + off
        spat = "xyz"[:d]
        gw[woff] = np.einsum("bo%s,bi%s->oi" % (spat, spat), gout, xp[sl])
        gxp[sl] += np.einsum("oi,bo...->bi...", w[woff], gout)
    gb = gout.sum(axis=(0,) + tuple(range(2, 2 + d)))
    centre = (slice(None), slice(None)) + tuple(slice(1, 1 + n) for n in spatial)
    gx = gxp[centre]
    return gx, gw, gb


def prelu(x, slope):
    """x if x > 0 else slope * x, slope per feature (axis 1)."""
    s = np.asarray(slope).reshape((1, -1) + (1,) * (x.ndim - 2))
    return np.where(x > 0, x, s * x)


def prelu_backward(x, slope, gout):
    s = np.asarray(slope).reshape((1, -1) + (1,) * (x.ndim - 2))
    gx = gout * np.where(x > 0, 1.0, s)
    neg = np.where(x > 0, 0.0, x)
    gslope = (gout * neg).sum(axis=(0,) + tuple(range(2, x.ndim)))
    return gx, gslope


def maxpool_with_indices(x):
    """2^d window max with step 2; indices are flat positions into the input's
    spatial volume. Odd extents pool over floor(n/2) windows; ties resolve to
    the first element in the window (C-order)."""
    d = x.ndim - 2
    B, C = x.shape[:2]
    spatial = x.shape[2:]
    pooled_spatial = tuple(n // 2 for n in spatial)
    crop = (slice(None), slice(None)) + tuple(slice(0, 2 * p) for p in pooled_spatial)
    xc = x[crop]
    # split each spatial axis into (window index, offset-in-window)
    shape = (B, C)
    for p in pooled_spatial:
        shape += (p, 2)
    xc = xc.reshape(shape)
    # bring the d offset axes to the end
    order = [0, 1] + [2 + 2 * i for i in range(d)] + [3 + 2 * i for i in range(d)]
    xw = xc.transpose(order).reshape((B, C) + pooled_spatial + (2 ** d,))
    arg = np.argmax(xw, axis=-1)
    pooled = np.take_along_axis(xw, arg[..., None], axis=-1)[..., 0]
    # decode window-local offsets and rebuild flat input-space indices
    strides = np.array([int(np.prod(spatial[i + 1:])) for i in range(d)])
    flat = np.zeros(arg.shape, dtype=np.int64)
    rem = arg
    for i in range(d):
        off = (rem >> (d - 1 - i)) & 1
        win = np.arange(pooled_spatial[i]).reshape(
            (1, 1) + tuple(pooled_spatial[i] if j == i else 1 for j in range(d)))
        flat += (2 * win + off) * strides[i]
    return pooled, flat


def max_unpool(values, indices, spatial):
    """Scatter pooled values to their recorded flat indices; zeros elsewhere."""
    B, C = values.shape[:2]
    n = int(np.prod(spatial))
    if indices.min() < 0 or indices.max() >= n:
        raise InvalidInputError("unpool index out of range")
    out = np.zeros((B, C, n))
    np.put_along_axis(out, indices.reshape(B, C, -1), values.reshape(B, C, -1),
                      axis=2)
    return out.reshape((B, C) + tuple(spatial))


def max_unpool_backward(indices, spatial, gout):
    B, C = gout.shape[:2]
    gflat = gout.reshape(B, C, -1)
    return np.take_along_axis(gflat, indices.reshape(B, C, -1), axis=2).reshape(
        indices.shape)


def maxpool_backward(indices, spatial, gout):
    """Route pooled-output cotangents back to the argmax input positions."""
    B, C = gout.shape[:2]
    n = int(np.prod(spatial))
    gx = np.zeros((B, C, n))
    np.put_along_axis(gx, indices.reshape(B, C, -1), gout.reshape(B, C, -1), axis=2)
    return gx.reshape((B, C) + tuple(spatial))


# ---------------------------------------------------------------------------
# full network


def sample_masks(config, batch, rng):
    """One Bernoulli(1-p)/(1-p) per-feature-map mask per dropout site,
    per example."""
    p = config.dropout_p
    masks = []
    for _, cout, _, has_dropout in config.layer_channels():
        if has_dropout:
            keep = rng.random((batch, cout)) >= p
            masks.append(keep.astype(np.float64) / (1.0 - p))
    return masks


def _forward_batch(weights, x, masks=None, record=False):
    """Run the network on a batch. Returns (outputs (B, d, *spatial), tape)."""
    config = weights.config
    d = config.ndim
    cpb = config.convs_per_block
    layers = weights.layers
    specs = config.layer_channels()
    tape = {"conv_in": [], "conv_pre": [], "mask_used": []} if record else None
    mask_iter = iter(masks) if masks is not None else None

    def run_conv(x, li):
        layer = layers[li]
        _, _, act, has_dropout = specs[li]
        if record:
            tape["conv_in"].append(x)
        z = conv(x, layer.w, layer.b)
        if record:
            tape["conv_pre"].append(z)
        y = prelu(z, layer.slope) if act else z
        m = None
        if has_dropout and mask_iter is not None:
            m = next(mask_iter)
            y = y * m.reshape(m.shape + (1,) * d)
        if record:
            tape["mask_used"].append(m)
        return y

    li = 0
    for _ in range(cpb):
        x = run_conv(x, li)
        li += 1
    spatial1 = x.shape[2:]
    x, idx1 = maxpool_with_indices(x)
    for _ in range(cpb):
        x = run_conv(x, li)
        li += 1
    spatial2 = x.shape[2:]
    code, idx2 = maxpool_with_indices(x)

    outputs = []
    dec_tapes = []
    for _ in range(d):
        y = max_unpool(code, idx2, spatial2)
        for _ in range(cpb):
            y = run_conv(y, li)
            li += 1
        y = max_unpool(y, idx1, spatial1)
        for _ in range(cpb):
            y = run_conv(y, li)
            li += 1
        outputs.append(y[:, 0])
    out = np.stack(outputs, axis=1)
    if record:
        tape.update(idx1=idx1, idx2=idx2, spatial1=spatial1, spatial2=spatial2)
    return out, tape


def _backward_batch(weights, tape, gout):
    """Parameter and mask-aware backward pass; returns flat gradient list
    aligned with NetworkWeights.parameters()."""
    config = weights.config
    d = config.ndim
    cpb = config.convs_per_block
    layers = weights.layers
    specs = config.layer_channels()
    n_layers = len(layers)
    grads = [None] * n_layers  # (gw, gb, gslope)

    def back_conv(li, gy):
        layer = layers[li]
        _, _, act, _ = specs[li]
        x_in = tape["conv_in"][li]
        z = tape["conv_pre"][li]
        m = tape["mask_used"][li]
        if m is not None:
            gy = gy * m.reshape(m.shape + (1,) * d)
        if act:
            gz, gslope = prelu_backward(z, layer.slope, gy)
        else:
            gz, gslope = gy, None
        gx, gw, gb = conv_backward(x_in, layer.w, gz)
        grads[li] = (gw, gb, gslope)
        return gx

    idx1, idx2 = tape["idx1"], tape["idx2"]
    spatial1, spatial2 = tape["spatial1"], tape["spatial2"]

    gcode = 0.0
    enc_layers = 2 * cpb
    for k in range(d - 1, -1, -1):
        g = gout[:, k][:, None, ...]
        base = enc_layers + k * 2 * cpb
        for i in range(2 * cpb - 1, cpb - 1, -1):
            g = back_conv(base + i, g)
        g = max_unpool_backward(idx1, spatial1, g)
        for i in range(cpb - 1, -1, -1):
            g = back_conv(base + i, g)
        gcode = gcode + max_unpool_backward(idx2, spatial2, g)

    g = maxpool_backward(idx2, spatial2, gcode)
    for li in range(2 * cpb - 1, cpb - 1, -1):
        g = back_conv(li, g)
    g = maxpool_backward(idx1, spatial1, g)
    for li in range(cpb - 1, -1, -1):
        g = back_conv(li, g)

    flat = []
    for li, layer in enumerate(layers):
        gw, gb, gslope = grads[li]
        flat.append(gw)
        flat.append(gb)
        if layer.slope is not None:
            flat.append(gslope)
    return flat


def forward(weights, config, patch, dropout_mode="off", rng=None):
    """Predict d momentum patches from one 2-layer appearance patch."""
    patch = np.asarray(patch, dtype=np.float64)
    want = (2,) + (config.patch_size,) * config.ndim
    if patch.shape != want:
        raise InvalidInputError("input patch shape %s, expected %s"
                                % (patch.shape, want))
    masks = None
    if dropout_mode == "sampled":
        if rng is None:
            raise InvalidInputError("sampled dropout mode needs an rng")
        masks = sample_masks(config, 1, rng)
    elif dropout_mode != "off":
        raise InvalidInputError("dropout_mode must be 'off' or 'sampled'")
    out, _ = _forward_batch(weights, patch[None], masks=masks)
    return out[0]


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0005
    decay: float = 0.1
    epochs: int = 10
    rmsprop_epsilon: float = 1e-8
    batch_size: int = 32
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidInputError("learning rate must be > 0")
        if not 0.0 < self.decay < 1.0:
            raise InvalidInputError("decay must lie in (0, 1)")


def l1_loss_and_grad(out, targets):
    resid = out - targets
    loss = float(np.mean(np.abs(resid)))
    return loss, np.sign(resid) / resid.size


def train(batches, net_config, train_config, weights=None):
    """Minimize the mean L1 difference with rmsprop.

    `batches` is a PatchBatch (or iterable of them) carrying momentum targets.
    Returns (weights, per-epoch mean loss trace)."""
    if hasattr(batches, "inputs"):
        batches = [batches]
    inputs = np.concatenate([b.inputs for b in batches])
    if any(b.targets is None for b in batches):
        raise InvalidInputError("training batches must carry momentum targets")
    targets = np.concatenate([b.targets for b in batches])

    rng = np.random.default_rng(train_config.rng_seed)
    if weights is None:
        weights = init_weights(net_config, rng)
    params = [p.astype(np.float64).copy() for p in weights.parameters()]
    weights.set_parameters(params)
    cache = [np.zeros_like(p) for p in params]
    n = inputs.shape[0]
    bs = train_config.batch_size
    trace = []

    for epoch in range(train_config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        seen = 0
        for start in range(0, n, bs):
            sel = order[start:start + bs]
            x = inputs[sel]
            y = targets[sel]
            masks = (sample_masks(net_config, len(sel), rng)
                     if net_config.dropout_p > 0 else None)
            out, tape = _forward_batch(weights, x, masks=masks, record=True)
            loss, gout = l1_loss_and_grad(out, y)
            if not np.isfinite(loss):
                raise DivergenceError("training loss became non-finite",
                                      epoch=epoch, batch=start // bs)
            grads = _backward_batch(weights, tape, gout)
            for p, c, g in zip(params, cache, grads):
                c *= train_config.decay
                c += (1.0 - train_config.decay) * g * g
                p -= train_config.learning_rate * g / (np.sqrt(c)
                                                       + train_config.rmsprop_epsilon)
            epoch_loss += loss * len(sel)
            seen += len(sel)
        trace.append(epoch_loss / seen)
    return weights, trace


# ---------------------------------------------------------------------------
# whole-image prediction


def predict_image(weights, config, moving, target, spec, threshold,
                  dropout_mode="off", rng_seed=0):
    """Sliding-window momentum prediction with background pruning and
    overlap averaging."""
    if moving.geometry != target.geometry:
        raise GeometryMismatchError("moving and target must share a geometry")
    grid = plan_grid(moving.geometry, spec)
    batch = extract(moving, target, grid)
    kept_batch, kept = prune(batch, threshold)
    d = config.ndim
    size = grid.size
    predictions = np.zeros((len(grid.origins), d) + size)
    if kept:
        if dropout_mode == "sampled":
            # one rng stream per patch, keyed by its original grid index
            key = (list(rng_seed) if isinstance(rng_seed, (tuple, list))
                   else [rng_seed])
            all_masks = [sample_masks(config, 1,
                                      np.random.default_rng(key + [i]))
                         for i in kept]
            n_sites = len(all_masks[0])
            masks = [np.concatenate([m[s] for m in all_masks])
                     for s in range(n_sites)]
        else:
            masks = None
        out, _ = _forward_batch(weights, kept_batch.inputs, masks=masks)
        predictions[kept] = out
    return assemble(predictions, grid)
