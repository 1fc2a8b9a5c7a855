"""Layer graph, network assembly, SGD training and evaluation."""
from dataclasses import dataclass, field
import logging
import math

import numpy as np

from . import tensor as tc
from .arch import ArchSpec
from .block import IgcConfig, IgcBlockParams, igc_block_backward, igc_block_forward
from .errors import ConfigError, InputError
from .rng import CounterRNG

log = logging.getLogger(__name__)

DTYPES = {"double": np.float64, "single": np.float32}


def _he(rng, shape, fan_in, dtype):
    return (rng.normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    """A differentiable step.  ``params``/``grads`` share keys."""

    decay = ()

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def forward(self, x, training):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def named_params(self, prefix):
        for k, v in self.params.items():
            yield f"{prefix}.{k}", v, k in self.decay, self, k

    def named_buffers(self, prefix):
        for k, v in self.buffers.items():
            yield f"{prefix}.{k}", v, self, k


class Conv(Layer):
    decay = ("weight",)

    def __init__(self, c_in, c_out, k, stride, rng, dtype):
        super().__init__()
        self.stride = stride
        self.params["weight"] = _he(rng, (c_out, c_in, k, k), c_in * k * k, dtype)

    def forward(self, x, training):
        self.x = x
        return tc.conv2d_forward(x, self.params["weight"], self.stride)

    def backward(self, grad):
        gx, self.grads["weight"] = tc.conv2d_backward(self.x, self.params["weight"], grad, self.stride)
        return gx


class IgcConv(Layer):
    """Primary group conv, interleave, secondary group conv, interleave back."""

    decay = ("primary", "secondary")

    def __init__(self, L, M, c_in, k, stride, rng, dtype):
        super().__init__()
        if c_in % L:
            raise ConfigError(f"{c_in} input channels do not split into {L} partitions")
        self.config = IgcConfig(L=L, M=M, k=k, stride=stride, M_in=c_in // L)
        self.params["primary"] = _he(rng.child("primary"), (L, M, c_in // L, k, k), (c_in // L) * k * k, dtype)
        self.params["secondary"] = _he(rng.child("secondary"), (M, L, L), L, dtype)

    def forward(self, x, training):
        self.cache = {}
        p = IgcBlockParams(self.params["primary"], self.params["secondary"])
        return igc_block_forward(x, self.config, p, training, self.cache)

    def backward(self, grad):
        p = IgcBlockParams(self.params["primary"], self.params["secondary"])
        gx, g = igc_block_backward(self.config, p, self.cache, grad)
        self.grads["primary"], self.grads["secondary"] = g.primary, g.secondary
        return gx


class GpcConv(Layer):
    """Group conv followed by a dense 1x1 conv over all channels."""

    decay = ("primary", "pointwise")

    def __init__(self, L, M, c_in, k, stride, rng, dtype):
        super().__init__()
        if c_in % L:
            raise ConfigError(f"{c_in} input channels do not split into {L} partitions")
        self.stride = stride
        G = L * M
        self.params["primary"] = _he(rng.child("primary"), (L, M, c_in // L, k, k), (c_in // L) * k * k, dtype)
        self.params["pointwise"] = _he(rng.child("pointwise"), (G, G), G, dtype)

    def forward(self, x, training):
        self.x = x
        self.y = tc.group_conv2d_forward(x, self.params["primary"], self.stride)
        return tc.conv2d_forward(self.y, self.params["pointwise"][:, :, None, None], 1, 0)

    def backward(self, grad):
        pw = self.params["pointwise"][:, :, None, None]
        gy, gpw = tc.conv2d_backward(self.y, pw, grad, 1, 0)
        gx, self.grads["primary"] = tc.group_conv2d_backward(self.x, self.params["primary"], gy, self.stride)
        self.grads["pointwise"] = gpw[:, :, 0, 0]
        return gx


class SumFusionConv(Layer):
    """L branch convolutions over the same input, outputs summed."""

    decay = ("branches",)

    def __init__(self, L, width, c_in, k, stride, rng, dtype):
        super().__init__()
        self.L, self.width, self.stride = L, width, stride
        self.params["branches"] = _he(rng, (L, width, c_in, k, k), c_in * k * k, dtype)

    def _stacked(self):
        b = self.params["branches"]
        return b.reshape(self.L * self.width, *b.shape[2:])

    def forward(self, x, training):
        self.x = x
        y = tc.conv2d_forward(x, self._stacked(), self.stride)
        n, _, h, w = y.shape
        return y.reshape(n, self.L, self.width, h, w).sum(axis=1)

    def backward(self, grad):
        g = np.concatenate([grad] * self.L, axis=1)
        gx, gk = tc.conv2d_backward(self.x, self._stacked(), g, self.stride)
        self.grads["branches"] = gk.reshape(self.params["branches"].shape)
        return gx


class BatchNorm(Layer):
    def __init__(self, channels, dtype):
        super().__init__()
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.state = tc.BatchNormState.fresh(channels, dtype)
        self.buffers["running_mean"] = self.state.running_mean
        self.buffers["running_var"] = self.state.running_var

    def forward(self, x, training):
        y, self.cache = tc.batchnorm_forward(x, self.params["gamma"], self.params["beta"], self.state, training)
        return y

    def backward(self, grad):
        gx, self.grads["gamma"], self.grads["beta"] = tc.batchnorm_backward(self.cache, grad)
        return gx


class ReLU(Layer):
    def forward(self, x, training):
        self.x = x
        return tc.relu_forward(x)

    def backward(self, grad):
        return tc.relu_backward(self.x, grad)


class GlobalAvgPool(Layer):
    def forward(self, x, training):
        self.shape = x.shape
        return tc.global_avg_pool_forward(x)

    def backward(self, grad):
        return tc.global_avg_pool_backward(self.shape, grad)


class Linear(Layer):
    decay = ("weight",)

    def __init__(self, d_in, d_out, rng, dtype):
        super().__init__()
        self.params["weight"] = _he(rng, (d_out, d_in), d_in, dtype)
        self.params["bias"] = np.zeros(d_out, dtype=dtype)

    def forward(self, x, training):
        self.x = x
        return tc.fully_connected_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, grad):
        gx, self.grads["weight"], self.grads["bias"] = tc.fully_connected_backward(
            self.x, self.params["weight"], grad)
        return gx


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)  # (name, layer) pairs

    def forward(self, x, training):
        for _, layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, grad):
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_params(self, prefix):
        for name, layer in self.layers:
            yield from layer.named_params(f"{prefix}.{name}" if prefix else name)

    def named_buffers(self, prefix):
        for name, layer in self.layers:
            yield from layer.named_buffers(f"{prefix}.{name}" if prefix else name)


class Residual(Sequential):
    """``relu(body(x) + skip(x))``; ``skip`` None means identity."""

    def __init__(self, body, skip=None):
        layers = [("body", body)] + ([("skip", skip)] if skip is not None else [])
        super().__init__(layers)
        self.body, self.skip = body, skip

    def forward(self, x, training):
        s = x if self.skip is None else self.skip.forward(x, training)
        self.pre = self.body.forward(x, training) + s
        return tc.relu_forward(self.pre)

    def backward(self, grad):
        g = tc.relu_backward(self.pre, grad)
        gx = self.body.backward(g)
        return gx + (g if self.skip is None else self.skip.backward(g))


# -- assembly ----------------------------------------------------------------

def make_transition(arch, stage, c_in, stride, rng, dtype):
    """The convolution of one block; stage transitions pass the old width in.

    Kept in one place so alternative down-sampling schemes can be swapped in.
    """
    k = arch.k
    bt = arch.block_type
    if bt == "RegConv":
        return Conv(c_in, stage.width, k, stride, rng, dtype)
    if bt == "SumFusion":
        return SumFusionConv(stage.L, stage.width, c_in, k, stride, rng, dtype)
    if bt == "IGC":
        return IgcConv(stage.L, stage.M, c_in, k, stride, rng, dtype)
    return GpcConv(stage.L, stage.M, c_in, k, stride, rng, dtype)


class Network(Sequential):
    def __init__(self, arch, layers, precision):
        super().__init__(layers)
        self.arch = arch
        self.precision = precision

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def parameters(self):
        """(name, array, decayed) for every trainable tensor, in a fixed order."""
        return [(n, a, d) for n, a, d, _, _ in self.named_params("")]

    def state_arrays(self):
        """Every tensor a checkpoint stores: parameters then BN statistics."""
        out = [(n, a) for n, a, _, _, _ in self.named_params("")]
        out += [(n, a) for n, a, _, _ in self.named_buffers("")]
        return out

    def count_params(self):
        return sum(a.size for _, a, _ in self.parameters())

    def logits(self, x, training=False):
        return self.forward(np.asarray(x, dtype=self.dtype), training)


def build_network(arch: ArchSpec, seed=0, precision="double"):
    """Stem conv, blocks per stage, global average pool, FC."""
    if precision not in DTYPES:
        raise ConfigError(f"precision must be 'double' or 'single', got {precision!r}")
    dtype = DTYPES[precision]
    rng = CounterRNG(seed, "init")
    widths = arch.widths
    layers = [("stem", Sequential([
        ("conv", Conv(arch.in_channels, widths[0], arch.k, 1, rng.child("stem"), dtype)),
        ("bn", BatchNorm(widths[0], dtype)),
        ("relu", ReLU()),
    ]))]
    c_in = widths[0]
    for i, stage in enumerate(arch.stages):
        w = widths[i]
        units = []
        for b in range(stage.blocks):
            stride = 2 if (i and b == 0) else 1
            conv = make_transition(arch, stage, c_in if b == 0 else w, stride,
                                   rng.child("stage", i, "block", b), dtype)
            units.append((f"block{b}", conv))
        seq = []
        if arch.identity_mappings:
            for b in range(0, stage.blocks, 2):
                (n1, c1), (n2, c2) = units[b], units[b + 1]
                body = Sequential([
                    (n1, c1), (f"{n1}_bn", BatchNorm(w, dtype)), (f"{n1}_relu", ReLU()),
                    (n2, c2), (f"{n2}_bn", BatchNorm(w, dtype)),
                ])
                skip = None
                if i and b == 0:
                    skip = Sequential([
                        ("conv", Conv(c_in, w, 1, 2, rng.child("stage", i, "proj"), dtype)),
                        ("bn", BatchNorm(w, dtype)),
                    ])
                seq.append((f"res{b // 2}", Residual(body, skip)))
        else:
            for name, conv in units:
                seq += [(name, conv), (f"{name}_bn", BatchNorm(w, dtype)), (f"{name}_relu", ReLU())]
        layers.append((f"stage{i + 1}", Sequential(seq)))
        if stage.blocks:
            c_in = w
    layers.append(("pool", GlobalAvgPool()))
    layers.append(("fc", Linear(c_in, arch.n_classes, rng.child("fc"), dtype)))
    return Network(arch, layers, precision)


# -- training ----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_drop_epochs: tuple = (0.5, 0.75, 0.875)
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.base_lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("learning rate, momentum and weight decay must be non-negative (momentum < 1)")

    def lr_at(self, epoch):
        drops = sum(epoch >= round(f * self.epochs) for f in self.lr_drop_epochs)
        return self.base_lr * 0.1 ** drops


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    diverged: bool = False
    message: str = ""


class NesterovSGD:
    def __init__(self, net, cfg):
        self.cfg = cfg
        self.slots = [(layer, key, decayed) for _, _, decayed, layer, key in net.named_params("")]
        self.velocity = [np.zeros_like(layer.params[key]) for layer, key, _ in self.slots]

    def step(self, lr):
        mu, wd = self.cfg.momentum, self.cfg.weight_decay
        for (layer, key, decayed), v in zip(self.slots, self.velocity):
            p = layer.params[key]
            g = layer.grads[key]
            if decayed and wd:
                g = g + wd * p
            v *= mu
            v += g
            p -= (lr * (g + mu * v)).astype(p.dtype, copy=False)


def _batch_images(net, dataset, idx, cfg, epoch, batch_no):
    from .data import augment

    x = dataset.images[idx]
    if cfg.augment:
        x = augment(x, CounterRNG(cfg.seed, "augment", epoch, batch_no), fill=dataset.pad_value())
    return np.asarray(x, dtype=net.dtype)


def train(net, dataset, cfg, eval_dataset=None, on_epoch=None):
    """Nesterov-momentum SGD.  Returns per-epoch history rows.

    A non-finite loss stops the run; the rows finished so far are returned
    with ``diverged`` set.
    """
    if len(dataset) == 0:
        raise InputError("cannot train on an empty dataset")
    opt = NesterovSGD(net, cfg)
    result = TrainResult()
    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = CounterRNG(cfg.seed, "order", epoch).permutation(n)
        loss_sum = 0.0
        correct = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = _batch_images(net, dataset, idx, cfg, epoch, b)
            y = dataset.labels[idx]
            logits = net.forward(x, training=True)
            loss, grad = tc.softmax_cross_entropy(logits, y)
            if not math.isfinite(loss):
                result.diverged = True
                result.message = f"loss became {loss} at epoch {epoch + 1}, batch {b}"
                log.error("training diverged: %s", result.message)
                return result
            net.backward(grad.astype(net.dtype, copy=False))
            opt.step(lr)
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y).sum())
        row = {
            "epoch": epoch + 1,
            "lr": lr,
            "train_loss": loss_sum / n,
            "train_acc": correct / n,
            "eval_acc": evaluate(net, eval_dataset) if eval_dataset is not None else float("nan"),
        }
        result.history.append(row)
        log.info("epoch %d lr %.4g loss %.4f train_acc %.4f eval_acc %.4f", row["epoch"], lr,
                 row["train_loss"], row["train_acc"], row["eval_acc"])
        if on_epoch is not None:
            on_epoch(row)
    return result


def predict(net, images, batch_size=256):
    preds = []
    for start in range(0, len(images), batch_size):
        preds.append(net.logits(images[start:start + batch_size]).argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(net, dataset, batch_size=256):
    """Top-1 accuracy with BN in inference mode."""
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    return float((predict(net, dataset.images, batch_size) == dataset.labels).mean())
