"""
Adapted U-Net
-------------
Encoder level ``k`` holds two 3x3 same-padded convolutions with ``base_filters
* 2**k`` filters, each followed by a per-channel PReLU, with 2x2 max pooling
between levels. The decoder mirrors it with learned 2x2 transposed
convolutions and skip concatenation; a 1x1 convolution and a sigmoid produce a
one-channel probability map of the input's spatial size.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from plumeseg.errors import ShapeError
from plumeseg.nn import ops
from plumeseg.nn.optim import ModelState


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    depth: int = 5
    base_filters: int = 16
    prelu_init: float = 0.25
    up_mode: str = "TransposedConv"

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.base_filters < 1 or self.in_channels < 1:
            raise ValueError("base_filters and in_channels must be >= 1")
        if self.up_mode != "TransposedConv":
            raise ValueError(f"unsupported up_mode {self.up_mode!r}")

    def filters(self, level: int) -> int:
        return self.base_filters * 2**level

    @property
    def multiple(self) -> int:
        return 2 ** (self.depth - 1)

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(cfg: UNetConfig) -> OrderedDict:
    """Name -> shape for every trainable tensor, in build order."""
    shapes = OrderedDict()

    def block(prefix, cin, cout):
        shapes[f"{prefix}.conv1.w"] = (cout, cin, 3, 3)
        shapes[f"{prefix}.conv1.b"] = (cout,)
        shapes[f"{prefix}.prelu1"] = (cout,)
        shapes[f"{prefix}.conv2.w"] = (cout, cout, 3, 3)
        shapes[f"{prefix}.conv2.b"] = (cout,)
        shapes[f"{prefix}.prelu2"] = (cout,)

    cin = cfg.in_channels
    for k in range(cfg.depth):
        block(f"enc{k}", cin, cfg.filters(k))
        cin = cfg.filters(k)
    for k in reversed(range(cfg.depth - 1)):
        shapes[f"up{k}.w"] = (cfg.filters(k + 1), cfg.filters(k), 2, 2)
        shapes[f"up{k}.b"] = (cfg.filters(k),)
        block(f"dec{k}", 2 * cfg.filters(k), cfg.filters(k))
    shapes["head.w"] = (1, cfg.filters(0), 1, 1)
    shapes["head.b"] = (1,)
    return shapes


def init_params(cfg: UNetConfig, rng: np.random.Generator, dtype=np.float32) -> OrderedDict:
    params = OrderedDict()
    a = cfg.prelu_init
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".b"):
            value = np.zeros(shape)
        elif ".prelu" in name:
            value = np.full(shape, a)
        elif name.startswith("up"):
            value = rng.normal(0.0, np.sqrt(1.0 / shape[0]), shape)
        elif name == "head.w":
            value = rng.normal(0.0, np.sqrt(1.0 / shape[1]), shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            value = rng.normal(0.0, np.sqrt(2.0 / ((1 + a * a) * fan_in)), shape)
        params[name] = value.astype(dtype)
    return params


class UNet:
    """Forward/backward graph over a :class:`ModelState`.

    ``forward`` caches activations when ``train`` is true; ``backward`` then
    returns gradients for every parameter. With ``pad=True`` inputs whose size
    is not a multiple of ``2**(depth-1)`` are reflect-padded and the output is
    center-cropped back.
    """

    def __init__(self, cfg: UNetConfig, state: ModelState | None = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        if state is None:
            state = ModelState.from_params(init_params(cfg, np.random.default_rng(seed), self.dtype))
        self.state = state
        self._cache = None
        self._pads = None
        self.last_signature = b""

    @property
    def params(self):
        return self.state.params

    def _conv(self, x, prefix, pad, tape):
        out, cache = ops.conv2d(x, self.params[prefix + ".w"], self.params[prefix + ".b"], pad=pad)
        tape.append(("conv", prefix, cache))
        return out

    def _prelu(self, x, name, tape, sig):
        out, cache = ops.prelu(x, self.params[name])
        tape.append(("prelu", name, cache))
        sig.append(np.packbits(x > 0).tobytes())
        return out

    def _block(self, x, prefix, tape, sig):
        x = self._prelu(self._conv(x, prefix + ".conv1", 1, tape), prefix + ".prelu1", tape, sig)
        return self._prelu(self._conv(x, prefix + ".conv2", 1, tape), prefix + ".prelu2", tape, sig)

    def _padding(self, h, w):
        m = self.cfg.multiple
        ph, pw = (-h) % m, (-w) % m
        return (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)

    def forward(self, x, train: bool = True, pad: bool = False):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected (n, {self.cfg.in_channels}, h, w) input, got {x.shape}")
        h, w = x.shape[2:]
        pads = self._padding(h, w) if pad else ((0, 0), (0, 0))
        if any(pads[0]) or any(pads[1]):
            x = np.pad(x, ((0, 0), (0, 0)) + pads, mode="reflect")
        m = self.cfg.multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} not divisible by {m}")

        tape, sig, skips = [], [], []
        for k in range(self.cfg.depth):
            x = self._block(x, f"enc{k}", tape, sig)
            if k < self.cfg.depth - 1:
                skips.append(x)
                x, cache = ops.maxpool2(x)
                tape.append(("pool", k, cache))
                sig.append(cache[1].tobytes())
        for k in reversed(range(self.cfg.depth - 1)):
            x, cache = ops.upconv2(x, self.params[f"up{k}.w"], self.params[f"up{k}.b"])
            tape.append(("up", f"up{k}", cache))
            x, split = ops.concat_skip(skips[k], x)
            tape.append(("cat", k, split))
            x = self._block(x, f"dec{k}", tape, sig)
        logits = self._conv(x, "head", 0, tape)
        prob, cache = ops.sigmoid(logits)
        (ph0, ph1), (pw0, pw1) = pads
        prob = prob[:, :, ph0 : prob.shape[2] - ph1, pw0 : prob.shape[3] - pw1]
        ops.check_finite(prob, where="forward pass")
        self.last_signature = b"".join(sig)
        if train:
            self._cache = (tape, cache)
            self._pads = pads
        else:
            self._cache = None
        return prob

    def backward(self, dprob, need_dx: bool = False):
        """Gradients of a scalar loss given d(loss)/d(prob); returns (grads, dx)."""
        if self._cache is None:
            raise RuntimeError("backward called without a training forward pass")
        tape, sig_cache = self._cache
        (ph0, ph1), (pw0, pw1) = self._pads
        dprob = np.asarray(dprob, dtype=self.dtype)
        if ph0 or ph1 or pw0 or pw1:
            dprob = np.pad(dprob, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
        grads = OrderedDict((k, np.zeros_like(v)) for k, v in self.params.items())
        dx = ops.sigmoid_backward(dprob, sig_cache)
        skip_grads = {}
        first_conv = tape[0][1]
        for kind, name, cache in reversed(tape):
            if kind == "conv":
                want_dx = need_dx or name != first_conv
                dx, dw, db = ops.conv2d_backward(dx, cache, need_dx=want_dx)
                grads[name + ".w"] += dw
                grads[name + ".b"] += db
            elif kind == "prelu":
                dx, ds = ops.prelu_backward(dx, cache)
                grads[name] += ds
            elif kind == "cat":
                denc, dx = ops.concat_skip_backward(dx, cache)
                skip_grads[name] = denc
            elif kind == "up":
                dx, dw, db = ops.upconv2_backward(dx, cache)
                grads[name + ".w"] += dw
                grads[name + ".b"] += db
            elif kind == "pool":
                dx = ops.maxpool2_backward(dx, cache) + skip_grads.pop(name)
        self._cache = None
        if need_dx and (ph0 or ph1 or pw0 or pw1):
            dx = _unpad_reflect(dx, 2, ph0, ph1)
            dx = _unpad_reflect(dx, 3, pw0, pw1)
        return grads, (dx if need_dx else None)

    def predict(self, x, batch: int = 8):
        """Inference on (n, c, h, w) inputs of any size, padding as needed."""
        x = np.asarray(x, dtype=self.dtype)
        outs = [self.forward(x[i : i + batch], train=False, pad=True) for i in range(0, len(x), batch)]
        return np.concatenate(outs, axis=0) if outs else np.zeros((0, 1) + x.shape[2:], self.dtype)


def _unpad_reflect(g, axis, before, after):
    """Adjoint of reflect padding along ``axis``: fold padded gradients back."""
    size = g.shape[axis] - before - after
    index = np.pad(np.arange(size), (before, after), mode="reflect")
    out = np.zeros(g.shape[:axis] + (size,) + g.shape[axis + 1 :], dtype=g.dtype)
    moved = np.moveaxis(out, axis, 0)
    np.add.at(moved, index, np.moveaxis(g, axis, 0))
    return out


def build_unet(cfg: UNetConfig, seed: int = 0, dtype=np.float32) -> UNet:
    return UNet(cfg, seed=seed, dtype=dtype)


def count_parameters(cfg: UNetConfig) -> int:
    """Closed-form parameter count for ``cfg``."""
    f = cfg.filters
    total = 0
    cin = cfg.in_channels
    for k in range(cfg.depth):
        total += 9 * cin * f(k) + f(k) + f(k) + 9 * f(k) * f(k) + f(k) + f(k)
        cin = f(k)
    for k in range(cfg.depth - 1):
        total += 4 * f(k + 1) * f(k) + f(k)
        total += 9 * 2 * f(k) * f(k) + 2 * f(k) + 9 * f(k) * f(k) + 2 * f(k)
    return total + f(0) + 1
