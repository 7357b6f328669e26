"""Conditional affine-coupling flows, one independent decoder per pyramid scale.

Each decoder maps a standardized feature vector z (conditioned on a 2-D
sinusoidal positional encoding c) to a latent u that should look standard
normal on outstanding images. Gradients are derived by hand; nothing here
needs an autodiff framework.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .encoder import FeaturePyramid, PyramidConfig
from .errors import ConfigError, FormatError, NumericError, TrainingError

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
MODEL_MAGIC = b"UNOQAMD1"
MODEL_VERSION = 1


@dataclass(frozen=True)
class PositionalEncodingConfig:
    dim: int = 32
    base: float = 10000.0

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 4:
            raise ConfigError(f"positional encoding dim must be a positive multiple of 4, got {self.dim}")
        if not self.base > 1:
            raise ConfigError("positional encoding base must exceed 1")


def _pe_axis(pos: np.ndarray, config: PositionalEncodingConfig) -> np.ndarray:
    i = np.arange(config.dim // 4)
    freq = config.base ** (-4.0 * i / config.dim)
    ang = np.asarray(pos, dtype=np.float64)[:, None] * freq[None, :]
    out = np.empty((len(ang), config.dim // 2))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def positional_encoding(h: int, w: int, H: int, W: int, config: PositionalEncodingConfig) -> np.ndarray:
    """Encoding of grid cell (h, w): first half encodes the row, second the column."""
    if not (0 <= h < H and 0 <= w < W):
        raise ConfigError(f"position ({h}, {w}) outside a {H}x{W} grid")
    return np.concatenate([_pe_axis(np.array([h]), config)[0], _pe_axis(np.array([w]), config)[0]])


def positional_grid(H: int, W: int, config: PositionalEncodingConfig) -> np.ndarray:
    """Row-major (H*W, C) array of encodings for every cell of an H x W grid."""
    rows = _pe_axis(np.arange(H), config)
    cols = _pe_axis(np.arange(W), config)
    return np.concatenate([np.repeat(rows, W, axis=0), np.tile(cols, (H, 1))], axis=1)


@dataclass(frozen=True)
class FlowConfig:
    blocks: int = 4
    hidden_mult: int = 2
    clamp: float = 1.9
    init_std: float = 0.01
    pe: PositionalEncodingConfig = field(default_factory=PositionalEncodingConfig)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    # coarse scales have few positions; extend their epochs up to this many steps
    min_steps: int = 0
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0 or self.min_steps < 0:
            raise ConfigError("epochs, batch_size and lr must be positive")

    def epochs_for(self, n_rows: int) -> int:
        steps_per_epoch = -(-n_rows // self.batch_size)
        return max(self.epochs, -(-self.min_steps // steps_per_epoch))


class CouplingBlock:
    """Affine coupling: half the dims pass through and parameterise the rest.

    The subnet is a two-layer tanh perceptron over [kept dims, condition];
    its outputs are a log-scale (soft-clamped to +-clamp) and a shift.
    """

    def __init__(self, dim: int, cond_dim: int, parity: int, hidden: int, clamp: float):
        self.dim = dim
        self.parity = parity
        self.clamp = clamp
        idx = np.arange(dim)
        self.kept = idx[idx % 2 == parity]
        self.moved = idx[idx % 2 != parity]
        n_in = len(self.kept) + cond_dim
        n_out = 2 * len(self.moved)
        self.W1 = np.zeros((n_in, hidden))
        self.b1 = np.zeros(hidden)
        self.W2 = np.zeros((hidden, n_out))
        self.b2 = np.zeros(n_out)

    @property
    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def _subnet(self, xk, c):
        inp = np.concatenate([xk, c], axis=1)
        hid = np.tanh(inp @ self.W1 + self.b1)
        raw = hid @ self.W2 + self.b2
        m = len(self.moved)
        s = self.clamp * np.tanh(raw[:, :m] / self.clamp)
        return inp, hid, s, raw[:, m:]

    def forward(self, x, c, cache=None):
        xk, xm = x[:, self.kept], x[:, self.moved]
        inp, hid, s, t = self._subnet(xk, c)
        es = np.exp(s)
        y = np.empty_like(x)
        y[:, self.kept] = xk
        y[:, self.moved] = xm * es + t
        if cache is not None:
            cache.append((inp, hid, s, es, xm))
        return y, s.sum(axis=1)

    def inverse(self, y, c):
        yk, ym = y[:, self.kept], y[:, self.moved]
        _, _, s, t = self._subnet(yk, c)
        x = np.empty_like(y)
        x[:, self.kept] = yk
        x[:, self.moved] = (ym - t) * np.exp(-s)
        return x, -s.sum(axis=1)

    def backward(self, gy, g_logdet, cached):
        """Backpropagate through the block.

        ``gy`` is dL/dy, ``g_logdet`` the per-sample weight of the block's
        log-determinant in L. Returns dL/dx and the parameter gradients.
        """
        inp, hid, s, es, xm = cached
        gk, gm = gy[:, self.kept], gy[:, self.moved]
        g_s = gm * xm * es + g_logdet[:, None]
        g_raw = np.concatenate([g_s * (1.0 - (s / self.clamp) ** 2), gm], axis=1)
        gW2 = hid.T @ g_raw
        gb2 = g_raw.sum(axis=0)
        g_pre = (g_raw @ self.W2.T) * (1.0 - hid ** 2)
        gW1 = inp.T @ g_pre
        gb1 = g_pre.sum(axis=0)
        g_inp = g_pre @ self.W1.T
        gx = np.empty_like(gy)
        gx[:, self.kept] = gk + g_inp[:, :len(self.kept)]
        gx[:, self.moved] = gm * es
        return gx, [gW1, gb1, gW2, gb2]


class FlowDecoder:
    """Coupling stack for one scale plus its input standardization."""

    def __init__(self, dim: int, config: FlowConfig, perms: Optional[Sequence[np.ndarray]] = None,
                 rng: Optional[np.random.Generator] = None):
        self.dim = dim
        self.config = config
        hidden = config.hidden_mult * dim
        self.blocks = [CouplingBlock(dim, config.pe.dim, b % 2, hidden, config.clamp)
                       for b in range(config.blocks)]
        if perms is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            perms = [rng.permutation(dim) for _ in range(config.blocks - 1)]
        self.perms = [np.asarray(p, dtype=np.int64) for p in perms]
        self.mean = np.zeros(dim)
        self.std = np.ones(dim)
        self.ll_mean = 0.0
        self.ll_std = 1.0

    @property
    def params(self) -> list[np.ndarray]:
        return [p for b in self.blocks for p in b.params]

    def init_weights(self, rng: np.random.Generator, std: float) -> None:
        for b in self.blocks:
            b.W1[...] = rng.normal(0.0, std, b.W1.shape)
            b.W2[...] = rng.normal(0.0, std, b.W2.shape)
            b.b1[...] = 0.0
            b.b2[...] = 0.0

    def standardize(self, z: np.ndarray) -> np.ndarray:
        return (z - self.mean) / self.std

    def forward(self, x, c, cache=None):
        """Map standardized features to latents; returns (u, logdet)."""
        x = np.asarray(x, dtype=np.float64)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(c))):
            raise NumericError("non-finite input to flow")
        logdet = np.zeros(len(x))
        for b, block in enumerate(self.blocks):
            if b:
                x = x[:, self.perms[b - 1]]
            x, ld = block.forward(x, c, cache)
            logdet += ld
        return x, logdet

    def inverse(self, u, c):
        x = np.asarray(u, dtype=np.float64)
        logdet = np.zeros(len(x))
        for b in range(len(self.blocks) - 1, -1, -1):
            x, ld = self.blocks[b].inverse(x, c)
            logdet += ld
            if b:
                inv = np.empty_like(self.perms[b - 1])
                inv[self.perms[b - 1]] = np.arange(self.dim)
                x = x[:, inv]
        return x, logdet

    def log_likelihood(self, x, c) -> np.ndarray:
        """Per-sample log-likelihood of already standardized features."""
        u, logdet = self.forward(x, c)
        return -0.5 * self.dim * LOG_2PI - 0.5 * np.sum(u * u, axis=1) + logdet

    def nll_loss(self, x, c) -> float:
        if len(x) == 0:
            raise ValueError("nll_loss needs a non-empty batch")
        return float(-np.mean(self.log_likelihood(x, c)))

    def loss_and_grads(self, x, c):
        """Mean NLL over the batch and its gradient for every parameter."""
        n = len(x)
        if n == 0:
            raise ValueError("nll_loss needs a non-empty batch")
        cache: list = []
        u, logdet = self.forward(x, c, cache)
        ll = -0.5 * self.dim * LOG_2PI - 0.5 * np.sum(u * u, axis=1) + logdet
        g = u / n
        g_ld = np.full(n, -1.0 / n)
        grads: list[list[np.ndarray]] = [None] * len(self.blocks)
        for b in range(len(self.blocks) - 1, -1, -1):
            g, grads[b] = self.blocks[b].backward(g, g_ld, cache[b])
            if b:
                gp = np.empty_like(g)
                gp[:, self.perms[b - 1]] = g
                g = gp
        return float(-ll.mean()), [gp for bg in grads for gp in bg]


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


def fit_decoder(z: np.ndarray, c: np.ndarray, flow_config: FlowConfig, train_config: TrainConfig,
                rng: np.random.Generator, label: str = "") -> tuple[FlowDecoder, list[float]]:
    """Maximum-likelihood fit of one decoder on pooled (feature, position) rows.

    Returns the decoder and the per-epoch mean training NLL.
    """
    n, dim = z.shape
    dec = FlowDecoder(dim, flow_config, rng=rng)
    dec.mean = z.mean(axis=0)
    dec.std = np.maximum(z.std(axis=0), 1e-6)
    dec.init_weights(rng, flow_config.init_std)
    x = dec.standardize(z)
    opt = Adam(dec.params, train_config.lr, train_config.beta1, train_config.beta2, train_config.eps)
    bs = train_config.batch_size
    history = []
    for epoch in range(train_config.epochs_for(n)):
        order = rng.permutation(n)
        total = 0.0
        for step, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            loss, grads = dec.loss_and_grads(x[idx], c[idx])
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingError(f"{label}loss diverged at epoch {epoch}, step {step}")
            opt.step(grads)
            total += loss * len(idx)
        history.append(total / n)
        log.debug("%sepoch %d mean nll %.5f", label, epoch, history[-1])
    # weights are persisted as float32; round now so save/load is exact
    for p in dec.params:
        p[...] = p.astype(np.float32)
    ll = dec.log_likelihood(x, c)
    if not np.all(np.isfinite(ll)):
        raise TrainingError(f"{label}non-finite training log-likelihood after fit")
    dec.ll_mean = float(ll.mean())
    dec.ll_std = float(ll.std())
    return dec, history


class FlowModel:
    """K independent decoders, one per pyramid scale."""

    def __init__(self, pyramid: PyramidConfig, flow: FlowConfig, decoders: list[FlowDecoder]):
        if len(decoders) != pyramid.K:
            raise ConfigError(f"{pyramid.K} scales but {len(decoders)} decoders")
        self.pyramid = pyramid
        self.flow = flow
        self.decoders = decoders
        self.history: list[list[float]] = []
        self._pe_cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def K(self) -> int:
        return len(self.decoders)

    def positions(self, H: int, W: int) -> np.ndarray:
        key = (H, W)
        if key not in self._pe_cache:
            self._pe_cache[key] = positional_grid(H, W, self.flow.pe)
        return self._pe_cache[key]

    def scale_log_likelihood(self, k: int, fmap: np.ndarray) -> np.ndarray:
        """(H, W) grid of log-likelihoods for scale k's feature map."""
        H, W, D = fmap.shape
        dec = self.decoders[k]
        if D != dec.dim:
            raise ConfigError(f"scale {k}: features have {D} dims, decoder expects {dec.dim}")
        x = dec.standardize(fmap.reshape(H * W, D).astype(np.float64))
        return dec.log_likelihood(x, self.positions(H, W)).reshape(H, W)

    # --- persistence ---

    def to_bytes(self, sections: Optional[dict[bytes, bytes]] = None) -> bytes:
        out = io.BytesIO()
        out.write(MODEL_MAGIC)
        p, f = self.pyramid, self.flow
        out.write(struct.pack("<3I", MODEL_VERSION, p.image_size, p.K))
        for s, d in zip(p.strides, p.dims):
            out.write(struct.pack("<2I", s, d))
        out.write(struct.pack("<Id", f.pe.dim, f.pe.base))
        out.write(struct.pack("<2Idd", f.blocks, f.hidden_mult, f.clamp, f.init_std))
        for dec in self.decoders:
            out.write(np.asarray(dec.mean, "<f8").tobytes())
            out.write(np.asarray(dec.std, "<f8").tobytes())
        for dec in self.decoders:
            out.write(struct.pack("<2d", dec.ll_mean, dec.ll_std))
        for dec in self.decoders:
            for perm in dec.perms:
                out.write(np.asarray(perm, "<u4").tobytes())
        for dec in self.decoders:
            for w in dec.params:
                out.write(np.asarray(w, "<f4").tobytes())
        sections = sections or {}
        out.write(struct.pack("<I", len(sections)))
        for tag, payload in sections.items():
            if len(tag) != 4:
                raise ValueError("section tags are 4 bytes")
            out.write(tag + struct.pack("<I", len(payload)) + payload)
        return out.getvalue()

    def save(self, path, sections: Optional[dict[bytes, bytes]] = None) -> None:
        Path(path).write_bytes(self.to_bytes(sections))

    @classmethod
    def from_bytes(cls, buf: bytes) -> tuple["FlowModel", dict[bytes, bytes]]:
        pos = 0

        def take(n, what):
            nonlocal pos
            if pos + n > len(buf):
                raise FormatError(f"truncated checkpoint while reading {what}", pos)
            chunk = buf[pos:pos + n]
            pos += n
            return chunk

        def arr(dtype, count, what):
            return np.frombuffer(take(np.dtype(dtype).itemsize * count, what), dtype=dtype).astype(
                np.float64 if dtype[1] == "f" else np.int64)

        magic = take(8, "magic")
        if magic != MODEL_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MODEL_MAGIC.decode()!r}", 0)
        version, image_size, K = struct.unpack("<3I", take(12, "header"))
        if version != MODEL_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", 8)
        sd = [struct.unpack("<2I", take(8, "pyramid config")) for _ in range(K)]
        pyramid = PyramidConfig(tuple(s for s, _ in sd), image_size, tuple(d for _, d in sd))
        pe_dim, pe_base = struct.unpack("<Id", take(12, "pe config"))
        blocks, hidden_mult, clamp, init_std = struct.unpack("<2Idd", take(24, "flow config"))
        flow = FlowConfig(blocks, hidden_mult, clamp, init_std, PositionalEncodingConfig(pe_dim, pe_base))
        means = []
        for k in range(K):
            d = pyramid.dims[k]
            means.append((arr("<f8", d, f"mean {k}"), arr("<f8", d, f"std {k}")))
        stats = [struct.unpack("<2d", take(16, f"ll stats {k}")) for k in range(K)]
        perms = [[arr("<u4", pyramid.dims[k], f"perm {k}") for _ in range(blocks - 1)] for k in range(K)]
        decoders = []
        for k in range(K):
            dec = FlowDecoder(pyramid.dims[k], flow, perms=perms[k])
            dec.mean, dec.std = means[k]
            dec.ll_mean, dec.ll_std = stats[k]
            decoders.append(dec)
        for k, dec in enumerate(decoders):
            for w in dec.params:
                w[...] = arr("<f4", w.size, f"weights of scale {k}").reshape(w.shape)
        (n_sections,) = struct.unpack("<I", take(4, "section count"))
        sections = {}
        for _ in range(n_sections):
            tag = take(4, "section tag")
            (n,) = struct.unpack("<I", take(4, "section length"))
            sections[tag] = take(n, f"section {tag!r}")
        if pos != len(buf):
            raise FormatError("trailing bytes after checkpoint sections", pos)
        return cls(pyramid, flow, decoders), sections

    @classmethod
    def load(cls, path) -> tuple["FlowModel", dict[bytes, bytes]]:
        return cls.from_bytes(Path(path).read_bytes())


def train(pyramids: Sequence[FeaturePyramid], pyramid_config: PyramidConfig,
          train_config: TrainConfig = TrainConfig(), flow_config: FlowConfig = FlowConfig()) -> FlowModel:
    """Fit one decoder per scale on the positions of outstanding training images."""
    if len(pyramids) < 2:
        raise ConfigError("training needs at least two images")
    expected = pyramid_config.shapes()
    for p in pyramids:
        if p.shapes != expected:
            raise ConfigError(f"training pyramid shapes {p.shapes} do not match config {expected}")
    decoders, histories = [], []
    for k, (H, W, D) in enumerate(expected):
        z = np.concatenate([p.scales[k].reshape(H * W, D) for p in pyramids]).astype(np.float64)
        c = np.tile(positional_grid(H, W, flow_config.pe), (len(pyramids), 1))
        rng = np.random.default_rng([train_config.seed, k])
        dec, hist = fit_decoder(z, c, flow_config, train_config, rng, label=f"scale {k}: ")
        log.info("scale %d: %d positions, final mean nll %.4f", k, len(z), -dec.ll_mean)
        decoders.append(dec)
        histories.append(hist)
    model = FlowModel(pyramid_config, flow_config, decoders)
    model.history = histories
    return model
