"""CRNN over single-pixel measurements.

The first fully connected layer (no bias) is the modulation front end:
its weight matrix is the candidate pattern set, so training the network
trains the patterns. At test time that layer is skipped and its output
is supplied by real or simulated measurements; because the layer has no
bias, feeding ``measure(x, patterns)`` into the rest of the network
reproduces the training-time forward pass exactly.

Pipeline: FC1 (M*N -> K) -> FC2 (K -> M*N, bias) -> reshape to a
1-channel N x M map -> conv/pool stack -> height-1 feature map read as
T column vectors -> stacked bidirectional LSTM -> per-timestep affine +
softmax over the alphabet plus blank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, GeometryError, InputError, NumericError
from .sensing import MeasurementVector, PatternSet, Scene

BLANK = 0
DEFAULT_CHANNELS = (64, 128, 256, 256)


@dataclass(frozen=True)
class ConvStage:
    """One conv stage: 'kernel'x'kernel' conv (stride, padding) to
    ``channels`` maps, ReLU, then an optional (pool_h, pool_w) max pool."""

    kernel: int
    stride: int
    padding: int
    channels: int
    pool: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ConfigError(f"bad conv stage geometry: {self}")
        if self.channels < 1:
            raise ConfigError(f"conv stage needs >= 1 channel: {self}")
        if self.pool is not None:
            ph, pw = self.pool
            if ph < 1 or pw < 1:
                raise ConfigError(f"bad pool size {self.pool}")
            object.__setattr__(self, "pool", (int(ph), int(pw)))

    def to_json(self) -> dict:
        return {
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
            "channels": self.channels,
            "pool": list(self.pool) if self.pool else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ConvStage":
        pool = obj.get("pool")
        return cls(
            kernel=int(obj["kernel"]),
            stride=int(obj["stride"]),
            padding=int(obj["padding"]),
            channels=int(obj["channels"]),
            pool=tuple(pool) if pool else None,
        )


def default_conv_spec(
    channels: Sequence[int] = DEFAULT_CHANNELS,
) -> tuple[ConvStage, ...]:
    """Four 3x3/s1/p1 stages; pools 2x2, 2x2, 2x1, 4x1 take a 32-high
    input down to height 1 while halving the width twice (96 -> 24)."""
    if len(channels) != 4:
        raise ConfigError(f"expected 4 channel counts, got {len(channels)}")
    pools = ((2, 2), (2, 2), (2, 1), (4, 1))
    return tuple(
        ConvStage(3, 1, 1, int(c), pool) for c, pool in zip(channels, pools)
    )


def trace_shapes(
    conv_spec: Sequence[ConvStage], height: int, width: int
) -> list[tuple[int, int, int]]:
    """Per-stage output shapes (channels, height, width) for a 1-channel
    input. Raises ConfigError if any dimension collapses below 1."""
    shapes = []
    h, w = height, width
    for i, st in enumerate(conv_spec):
        h = (h + 2 * st.padding - st.kernel) // st.stride + 1
        w = (w + 2 * st.padding - st.kernel) // st.stride + 1
        if st.pool is not None:
            ph, pw = st.pool
            h = (h - ph) // ph + 1
            w = (w - pw) // pw + 1
        if h < 1 or w < 1:
            raise ConfigError(
                f"conv stage {i} leaves empty output ({h}x{w}) "
                f"for {height}x{width} input"
            )
        shapes.append((st.channels, h, w))
    return shapes


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and sizing of the recognizer.

    T (timesteps) and feature_dim are derived from conv_spec by shape
    tracing; the stack must end at height 1 or construction fails.
    """

    m: int = 96
    n: int = 32
    k: int = 150
    alphabet_size: int = 65
    lstm_hidden: int = 256
    lstm_layers: int = 2
    conv_spec: tuple[ConvStage, ...] = field(default_factory=default_conv_spec)
    cell: str = "standard"
    standardize: bool = False
    t: int = field(init=False)
    feature_dim: int = field(init=False)

    def __post_init__(self):
        for name in ("m", "n", "k", "alphabet_size", "lstm_hidden", "lstm_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.cell not in ("standard", "paper_simplified"):
            raise ConfigError(f"unknown cell kind {self.cell!r}")
        if not self.conv_spec:
            raise ConfigError("conv_spec must have at least one stage")
        object.__setattr__(self, "conv_spec", tuple(self.conv_spec))
        shapes = trace_shapes(self.conv_spec, self.n, self.m)
        ch, h, w = shapes[-1]
        if h != 1:
            raise ConfigError(
                f"conv_spec must end at height 1, got {h} "
                f"(shapes: {shapes})"
            )
        object.__setattr__(self, "t", w)
        object.__setattr__(self, "feature_dim", ch)

    @property
    def num_classes(self) -> int:
        return self.alphabet_size + 1  # plus blank

    @classmethod
    def plates(cls, k: int, **overrides) -> "ModelConfig":
        """The 96x32, 65-symbol plate-recognition configuration.

        Seven-character labels need T >= 13 in the worst repeated-label
        case, so shorter sequence lengths are rejected here.
        """
        cfg = cls(m=96, n=32, k=k, alphabet_size=65, **overrides)
        if cfg.t < 13:
            raise ConfigError(
                f"T={cfg.t} cannot carry 7-character labels (need >= 13)"
            )
        return cfg

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "n": self.n,
            "k": self.k,
            "alphabet_size": self.alphabet_size,
            "lstm_hidden": self.lstm_hidden,
            "lstm_layers": self.lstm_layers,
            "conv_spec": [st.to_json() for st in self.conv_spec],
            "cell": self.cell,
            "standardize": self.standardize,
            "t": self.t,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        cfg = cls(
            m=int(obj["m"]),
            n=int(obj["n"]),
            k=int(obj["k"]),
            alphabet_size=int(obj["alphabet_size"]),
            lstm_hidden=int(obj["lstm_hidden"]),
            lstm_layers=int(obj["lstm_layers"]),
            conv_spec=tuple(ConvStage.from_json(s) for s in obj["conv_spec"]),
            cell=str(obj.get("cell", "standard")),
            standardize=bool(obj.get("standardize", False)),
        )
        if "t" in obj and int(obj["t"]) != cfg.t:
            raise ConfigError(
                f"stored t={obj['t']} disagrees with traced t={cfg.t}"
            )
        return cfg


@dataclass(frozen=True)
class PosteriorGrid:
    """T x (alphabet_size+1) row-stochastic matrix; blank at column 0."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise GeometryError(f"grid must be 2-D, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise InputError("grid contains non-finite entries")
        if p.min() < -1e-9 or p.max() > 1.0 + 1e-9:
            raise InputError("grid entries outside [0,1]")
        sums = p.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise InputError(
                f"grid rows must sum to 1 within 1e-6, worst "
                f"{np.abs(sums - 1.0).max():g}"
            )
        object.__setattr__(self, "probs", np.clip(p, 0.0, 1.0))

    @property
    def timesteps(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]


def extract_sequence(feature_map: np.ndarray) -> list[np.ndarray]:
    """Read a height-1 feature map as a left-to-right list of T vectors.

    Accepts (C, 1, W) or (C, W); column t becomes x_t.
    """
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim == 3:
        if fm.shape[1] != 1:
            raise GeometryError(
                f"feature map must have height 1, got {fm.shape[1]}"
            )
        fm = fm[:, 0, :]
    if fm.ndim != 2:
        raise GeometryError(f"feature map must be (C,1,W) or (C,W), got {fm.shape}")
    return [fm[:, t].copy() for t in range(fm.shape[1])]


class LSTMCellParams(NamedTuple):
    """Packed gate weights, rows ordered (i, f, o, g) with g the tanh
    candidate: w_x is (4H, D), w_h is (4H, H), bias is (4H,)."""

    w_x: torch.Tensor
    w_h: torch.Tensor
    bias: torch.Tensor


def lstm_cell_step(
    x_t: torch.Tensor,
    h_prev: torch.Tensor,
    c_prev: torch.Tensor,
    params: LSTMCellParams,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One standard gated step: c = f*c_prev + i*tanh(g), h = o*tanh(c).

    Works batched (B, D) or single (D,).
    """
    z = x_t @ params.w_x.T + h_prev @ params.w_h.T + params.bias
    hidden = z.shape[-1] // 4
    i, f, o, g = z.split(hidden, dim=-1)
    i = torch.sigmoid(i)
    f = torch.sigmoid(f)
    o = torch.sigmoid(o)
    c_t = f * c_prev + i * torch.tanh(g)
    h_t = o * torch.tanh(c_t)
    return h_t, c_t


def simplified_cell_step(
    x_t: torch.Tensor,
    h_prev: torch.Tensor,
    c_prev: torch.Tensor,
    w_x: torch.Tensor,
    w_h: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Gateless ablation cell: chat = tanh(W x + V h); the cell state is
    the running product c = c_prev * chat and the output is tanh(c).
    Callers must start c at ones or the product stays pinned at zero.
    """
    chat = torch.tanh(x_t @ w_x.T + h_prev @ w_h.T)
    c_t = c_prev * chat
    return torch.tanh(c_t), c_t


class BiLSTMLayer(nn.Module):
    """Forward and backward passes with independent weights, fused by
    concatenation per timestep."""

    def __init__(self, input_dim: int, hidden: int, cell: str, *,
                 generator: torch.Generator, dtype: torch.dtype):
        super().__init__()
        self.hidden = hidden
        self.cell = cell
        rows = hidden if cell == "paper_simplified" else 4 * hidden
        for side in ("fwd", "bwd"):
            self.register_parameter(
                f"{side}_w_x",
                nn.Parameter(_uniform((rows, input_dim), input_dim, generator, dtype)),
            )
            self.register_parameter(
                f"{side}_w_h",
                nn.Parameter(_uniform((rows, hidden), hidden, generator, dtype)),
            )
            if cell != "paper_simplified":  # the gateless cell has no bias
                self.register_parameter(
                    f"{side}_bias",
                    nn.Parameter(_uniform((rows,), hidden, generator, dtype)),
                )

    def _run(self, seq: torch.Tensor, side: str) -> list[torch.Tensor]:
        t_len, batch = seq.shape[0], seq.shape[1]
        kw = {"dtype": seq.dtype, "device": seq.device}
        h = torch.zeros(batch, self.hidden, **kw)
        if self.cell == "paper_simplified":
            c = torch.ones(batch, self.hidden, **kw)
        else:
            c = torch.zeros(batch, self.hidden, **kw)
        order = range(t_len) if side == "fwd" else range(t_len - 1, -1, -1)
        out: list[torch.Tensor | None] = [None] * t_len
        for t in order:
            if self.cell == "paper_simplified":
                h, c = simplified_cell_step(
                    seq[t], h, c,
                    getattr(self, f"{side}_w_x"), getattr(self, f"{side}_w_h"),
                )
            else:
                params = LSTMCellParams(
                    getattr(self, f"{side}_w_x"),
                    getattr(self, f"{side}_w_h"),
                    getattr(self, f"{side}_bias"),
                )
                h, c = lstm_cell_step(seq[t], h, c, params)
            out[t] = h
        return out  # type: ignore[return-value]

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        """seq (T, B, D) -> (T, B, 2H)."""
        fwd = self._run(seq, "fwd")
        bwd = self._run(seq, "bwd")
        return torch.stack([torch.cat([f, b], dim=-1)
                            for f, b in zip(fwd, bwd)])


def _uniform(shape, fan_in: int, generator: torch.Generator,
             dtype: torch.dtype) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    t = torch.empty(shape, dtype=torch.float64)
    t.uniform_(-bound, bound, generator=generator)
    return t.to(dtype)


class CRNN(nn.Module):
    """The full recognizer. ``seed`` fixes every initial weight; two
    instances built with the same (config, seed, dtype) are bit-identical.
    """

    def __init__(self, config: ModelConfig, *, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)

        # FC1 weights are the candidate patterns; no bias, so simulated
        # measurements can stand in for its output at test time.
        fc1 = torch.empty(config.k, config.m * config.n, dtype=torch.float64)
        fc1.uniform_(-1.0, 1.0, generator=gen)
        self.fc1_weight = nn.Parameter(fc1.to(dtype))

        self.fc2 = nn.Linear(config.k, config.m * config.n, dtype=dtype)
        with torch.no_grad():
            self.fc2.weight.copy_(
                _uniform(self.fc2.weight.shape, config.k, gen, dtype))
            self.fc2.bias.copy_(
                _uniform(self.fc2.bias.shape, config.k, gen, dtype))

        stages = []
        in_ch = 1
        for st in config.conv_spec:
            conv = nn.Conv2d(in_ch, st.channels, st.kernel, st.stride,
                             st.padding, dtype=dtype)
            fan_in = in_ch * st.kernel * st.kernel
            with torch.no_grad():
                conv.weight.copy_(_uniform(conv.weight.shape, fan_in, gen, dtype))
                conv.bias.copy_(_uniform(conv.bias.shape, fan_in, gen, dtype))
            block: list[nn.Module] = [conv, nn.ReLU()]
            if st.pool is not None:
                block.append(nn.MaxPool2d(st.pool))
            stages.append(nn.Sequential(*block))
            in_ch = st.channels
        self.convs = nn.ModuleList(stages)

        lstms = []
        dim = config.feature_dim
        for _ in range(config.lstm_layers):
            lstms.append(BiLSTMLayer(dim, config.lstm_hidden, config.cell,
                                     generator=gen, dtype=dtype))
            dim = 2 * config.lstm_hidden
        self.lstms = nn.ModuleList(lstms)

        self.classifier = nn.Linear(dim, config.num_classes, dtype=dtype)
        with torch.no_grad():
            self.classifier.weight.copy_(
                _uniform(self.classifier.weight.shape, dim, gen, dtype))
            self.classifier.bias.copy_(
                _uniform(self.classifier.bias.shape, dim, gen, dtype))

    @property
    def dtype(self) -> torch.dtype:
        return self.fc1_weight.dtype

    def _check(self, name: str, t: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite activations after {name}")
        return t

    def conv_features(self, img: torch.Tensor) -> torch.Tensor:
        """(B, 1, N, M) map -> (B, C, 1, T) features."""
        for i, stage in enumerate(self.convs):
            img = self._check(f"conv stage {i}", stage(img))
        return img

    def infer_grid(self, y: torch.Tensor) -> torch.Tensor:
        """Measurements (B, K) -> posteriors (B, T, classes). Differentiable;
        shared by the training path, which guarantees the train/infer
        consistency identity."""
        if y.ndim != 2 or y.shape[1] != self.config.k:
            raise ConfigError(
                f"expected (B, {self.config.k}) measurements, got {tuple(y.shape)}"
            )
        if self.config.standardize:
            # Per-vector zero-mean/unit-std rescaling of the K measurements.
            # Nonnegative patterns produce a large common-mode offset that
            # saturates the downstream stack when FC1 is frozen; this removes
            # it identically on the training and inference paths. The
            # sqrt(var + eps) form stays differentiable (and finite) even for
            # constant vectors.
            mean = y.mean(dim=-1, keepdim=True)
            var = y.var(dim=-1, unbiased=False, keepdim=True)
            y = (y - mean) / torch.sqrt(var + 1e-8)
        z = self._check("fc2", self.fc2(y))
        img = z.view(-1, 1, self.config.n, self.config.m)
        feat = self.conv_features(img)  # (B, C, 1, T)
        seq = feat.squeeze(2).permute(2, 0, 1)  # (T, B, C)
        for i, layer in enumerate(self.lstms):
            seq = self._check(f"bilstm layer {i}", layer(seq))
        logits = self._check("classifier", self.classifier(seq))
        probs = torch.softmax(logits, dim=-1)
        return probs.permute(1, 0, 2)

    def measure_batch(self, x: torch.Tensor) -> torch.Tensor:
        """Scene vectors (B, M*N) -> simulated measurements (B, K) through
        the candidate patterns (FC1). Differentiable."""
        if x.ndim != 2 or x.shape[1] != self.config.m * self.config.n:
            raise ConfigError(
                f"expected (B, {self.config.m * self.config.n}) scene "
                f"vectors, got {tuple(x.shape)}"
            )
        return self._check("fc1", x @ self.fc1_weight.T)

    def train_grid(self, x: torch.Tensor) -> torch.Tensor:
        """Scenes (B, M*N) -> posteriors (B, T, classes) through FC1."""
        return self.infer_grid(self.measure_batch(x))

    def _to_grid(self, probs: torch.Tensor) -> PosteriorGrid:
        # exactify row sums in f64 so the grid invariant holds at any dtype
        p = probs.detach().to(torch.float64)
        p = p / p.sum(dim=-1, keepdim=True)
        return PosteriorGrid(p.numpy())

    def forward_train(self, scene: Scene) -> PosteriorGrid:
        if (scene.height, scene.width) != (self.config.n, self.config.m):
            raise ConfigError(
                f"scene is {scene.height}x{scene.width}, model wants "
                f"{self.config.n}x{self.config.m}"
            )
        x = torch.from_numpy(scene.ravel()[None, :]).to(self.dtype)
        with torch.no_grad():
            return self._to_grid(self.train_grid(x)[0])

    def forward_infer(self, m: MeasurementVector) -> PosteriorGrid:
        if m.k != self.config.k:
            raise ConfigError(f"measurement has K={m.k}, model wants {self.config.k}")
        y = torch.from_numpy(m.values[None, :]).to(self.dtype)
        with torch.no_grad():
            return self._to_grid(self.infer_grid(y)[0])

    def pattern_set(self) -> PatternSet:
        """FC1 weights as a PatternSet; only valid once the weights fit a
        physical mode (post-projection or loaded signed/random)."""
        w = self.fc1_weight.detach().to(torch.float64).numpy().copy()
        if np.all(np.isin(w, (-1.0, 1.0))):
            mode = "signed_binary"
        elif w.min() >= 0.0 and w.max() <= 1.0:
            mode = "optimized_unit"
        else:
            raise InputError(
                "FC1 weights fit no display mode; project them first"
            )
        return PatternSet(w, mode=mode, height=self.config.n,
                          width=self.config.m)

    def set_patterns(self, patterns: PatternSet) -> None:
        if patterns.patterns.shape != tuple(self.fc1_weight.shape):
            raise ConfigError(
                f"pattern shape {patterns.patterns.shape} != FC1 "
                f"{tuple(self.fc1_weight.shape)}"
            )
        if (patterns.height, patterns.width) != (self.config.n, self.config.m):
            raise ConfigError("pattern geometry disagrees with model")
        with torch.no_grad():
            self.fc1_weight.copy_(
                torch.from_numpy(patterns.patterns).to(self.dtype))
