"""Parameters, Adam, and the small layers every learning module is built from."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .conv import conv3d, conv_transpose3d
from .tensor import ShapeError, Tensor


class MissingGradError(RuntimeError):
    def __init__(self, names: Sequence[str]):
        self.names = list(names)
        shown = ", ".join(self.names[:10]) + (" ..." if len(self.names) > 10 else "")
        super().__init__(f"no gradient for {len(self.names)} parameter(s): {shown}")


@dataclass
class ParamStore:
    """Named parameters plus Adam moment buffers."""

    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str | Iterable[str] = "") -> list[str]:
        prefixes = (prefix,) if isinstance(prefix, str) else tuple(prefix)
        return [n for n in self.params if n.startswith(prefixes)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_values(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.values for n, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, values in arrays.items():
            if name not in self.params:
                if strict:
                    raise KeyError(f"unknown parameter {name!r} in checkpoint")
                continue
            p = self.params[name]
            if p.shape != values.shape:
                raise ShapeError("load", p.shape, values.shape, detail=name)
            p.values = np.array(values, dtype=np.float64)
        if strict:
            missing = set(self.params) - set(arrays)
            if missing:
                raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")


def optimizer_step(
    store: ParamStore, lr: float, only: str | Iterable[str] | None = None, allow_missing: bool = False
) -> None:
    """One Adam update over ``store`` (or the names under the ``only`` prefixes); clears grads.

    Parameters without a gradient raise ``MissingGradError`` unless
    ``allow_missing`` is set, in which case they are treated as receiving a
    zero gradient.
    """
    names = list(store.params) if only is None else store.names(only)
    missing = [n for n in names if store.params[n].grad is None]
    if missing and not allow_missing:
        raise MissingGradError(missing)
    b1, b2, eps = store.beta1, store.beta2, store.eps
    for n in names:
        p = store.params[n]
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        m = store.m.get(n)
        if m is None:
            m = store.m[n] = np.zeros(p.shape)
            store.v[n] = np.zeros(p.shape)
        v = store.v[n]
        t = store.t.get(n, 0) + 1
        # moment buffers are owned by the store, so update them in place
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        g2 = g * g
        g2 *= 1.0 - b2
        v += g2
        denom = np.empty_like(v)
        np.sqrt(v, out=denom)
        denom /= np.sqrt(1.0 - b2**t)
        denom += eps
        step = np.divide(m, denom, out=denom)
        step *= lr / (1.0 - b1**t)
        p.values = p.values - step
        store.t[n] = t
        p.grad = None
    store.step += 1


def max_pool_aggregate(codes: Sequence[Tensor]) -> Tensor:
    """Elementwise maximum over a non-empty list of same-shaped codes (multi-view fusion)."""
    if len(codes) == 0:
        raise ValueError("max_pool_aggregate needs at least one code")
    if len(codes) == 1:
        return T.as_tensor(codes[0])
    return T.stack(list(codes), axis=0).max(axis=0)


# -- layers --------------------------------------------------------------------
def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def he(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Dense:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, rng, bias: bool = True, init: str = "he"):
        if init == "zeros":
            w = np.zeros((n_in, n_out))
        elif init == "glorot":
            w = glorot(rng, n_in, n_out, (n_in, n_out))
        else:
            w = he(rng, n_in, (n_in, n_out))
        self.n_in, self.n_out = n_in, n_out
        self.w = store.add(f"{name}.w", w)
        self.b = store.add(f"{name}.b", np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError("dense", x.shape, self.w.shape)
        y = x @ self.w
        return y + self.b if self.b is not None else y


class MLP:
    """Stack of dense layers; ``acts`` names the activation after each layer."""

    def __init__(self, store, name, n_in, widths: Sequence[int], acts: Sequence[str], rng, last_init: str = "glorot"):
        if len(widths) != len(acts):
            raise ValueError("widths and acts must have equal length")
        self.layers = []
        self.acts = list(acts)
        prev = n_in
        for i, w in enumerate(widths):
            init = last_init if i == len(widths) - 1 else "he"
            self.layers.append(Dense(store, f"{name}.fc{i}", prev, w, rng, init=init))
            prev = w

    def __call__(self, x: Tensor) -> Tensor:
        for layer, act in zip(self.layers, self.acts):
            x = activate(layer(x), act)
        return x


def activate(x: Tensor, act: str) -> Tensor:
    if act == "relu":
        return T.relu(x)
    if act == "tanh":
        return T.tanh(x)
    if act == "sigmoid":
        return T.sigmoid(x)
    if act in ("none", "identity", None):
        return x
    raise ValueError(f"unknown activation {act!r}")


class Conv3d:
    def __init__(self, store, name, c_in, c_out, rng, kernel=3, stride=1, padding=1, bias=True):
        k = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        fan_in = int(np.prod(k)) * c_in
        self.stride, self.padding = stride, padding
        self.w = store.add(f"{name}.w", he(rng, fan_in, (*k, c_in, c_out)))
        self.b = store.add(f"{name}.b", np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class ConvTranspose3d:
    def __init__(self, store, name, c_in, c_out, rng, kernel=3, stride=2, padding=1, bias=True):
        k = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        fan_in = int(np.prod(k)) * c_in
        self.stride, self.padding = stride, padding
        # scatter-style init: each output sees roughly prod(k)/stride^3 inputs
        self.w = store.add(f"{name}.w", he(rng, max(fan_in // 8, 1), (*k, c_in, c_out)))
        self.b = store.add(f"{name}.b", np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor, output_padding=0) -> Tensor:
        return conv_transpose3d(x, self.w, self.b, stride=self.stride, padding=self.padding, output_padding=output_padding)


# -- image encoder ---------------------------------------------------------------
@dataclass
class EncoderOutput:
    """Global shape code plus pixel-aligned feature maps ``(tensor (H/f, W/f, C), f)``."""

    global_code: Tensor
    feature_maps: list[tuple[Tensor, int]]

    @property
    def feature_width(self) -> int:
        return sum(fm.shape[-1] for fm, _ in self.feature_maps)


class ImageEncoder:
    """Strided conv encoder: 16/32/64/128 channels at /2../16, one more conv, pool, dense."""

    channels = (16, 32, 64, 128)

    def __init__(self, store: ParamStore, rng, name: str = "enc", in_channels: int = 3, code_dim: int = 512, bias: bool = True):
        self.name = name
        self.code_dim = code_dim
        self.convs = []
        prev = in_channels
        for i, c in enumerate(self.channels):
            self.convs.append(Conv3d(store, f"{name}.conv{i}", prev, c, rng, kernel=(1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1), bias=bias))
            prev = c
        self.head = Conv3d(store, f"{name}.conv{len(self.channels)}", prev, prev, rng, kernel=(1, 3, 3), stride=1, padding=(0, 1, 1), bias=bias)
        self.fc = Dense(store, f"{name}.fc", prev, code_dim, rng, bias=bias, init="glorot")

    @property
    def factors(self) -> list[int]:
        return [2 ** (i + 1) for i in range(len(self.channels))]

    @property
    def feature_width(self) -> int:
        return sum(self.channels)

    def __call__(self, image) -> EncoderOutput:
        img = T.as_tensor(image)
        if img.ndim != 3:
            raise ShapeError("image_encoder", img.shape, detail="expected H x W x C")
        h, w, c = img.shape
        if h != w or h % 16:
            raise ShapeError("image_encoder", img.shape, detail="image must be square with side divisible by 16")
        x = img.reshape(1, 1, h, w, c)
        maps = []
        for conv, f in zip(self.convs, self.factors):
            x = T.relu(conv(x))
            maps.append((x.reshape(h // f, w // f, x.shape[-1]), f))
        x = T.relu(self.head(x))
        pooled = x.mean(axis=(0, 1, 2, 3))
        code = self.fc(pooled.reshape(1, -1)).reshape(self.code_dim)
        return EncoderOutput(code, maps)


def toy_image_encoder(image, encoder: ImageEncoder) -> EncoderOutput:
    return encoder(image)


def encode_views(encoder: ImageEncoder, images: Sequence) -> tuple[Tensor, list[EncoderOutput]]:
    """Encode each view; the global codes are fused by max-pooling.

    Per-view outputs are returned as well: local features must be lifted
    with each view's own camera before they can be pooled.
    """
    outs = [encoder(im) for im in images]
    return max_pool_aggregate([o.global_code for o in outs]), outs
