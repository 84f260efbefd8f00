"""Enhanced blocks, invertible residual blocks, downscaling modules and the full model.

Branch naming follows the coupling code: ``u1`` is the high-frequency branch
(3C channels) and ``u2`` the low-frequency, image-shaped branch (C channels)
that ends up as the low-resolution output.
"""
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .wavelet import WaveletBands, haar_forward, haar_inverse, residual_decompose, residual_recompose

EB_KINDS = ("PCB", "RB", "RBPlus")
COUPLING_MODES = ("ThreeEb", "LiteralEq3")

# hidden widths are not published; these are desk-scale choices
PRESETS = {
    "S": {"irbs_per_rdm": 4, "hidden_channels": 32},
    "M": {"irbs_per_rdm": 8, "hidden_channels": 48},
    "L": {"irbs_per_rdm": 12, "hidden_channels": 64},
}


@dataclass(frozen=True)
class EbConfig:
    kind: str
    in_channels: int
    hidden_channels: int
    out_channels: int
    slope: float = 0.2

    def __post_init__(self):
        if self.kind not in EB_KINDS:
            raise ValueError(f"unknown EB kind {self.kind!r}; expected one of {EB_KINDS}")
        if self.kind == "RBPlus" and self.hidden_channels < 4:
            raise ValueError("RBPlus needs hidden_channels >= 4")


@dataclass(frozen=True)
class ModelConfig:
    scale: int = 2
    channels: int = 3
    irbs_per_rdm: int = 4
    hidden_channels: int = 32
    eb_kind: str = "RB"
    coupling_mode: str = "ThreeEb"
    clamp_alpha: float = 1.0
    long_skip: bool = True
    slope: float = 0.2

    def __post_init__(self):
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        if self.eb_kind not in EB_KINDS:
            raise ValueError(f"unknown eb_kind {self.eb_kind!r}; expected one of {EB_KINDS}")
        if self.coupling_mode not in COUPLING_MODES:
            raise ValueError(f"unknown coupling_mode {self.coupling_mode!r}; expected one of {COUPLING_MODES}")
        if self.irbs_per_rdm < 0 or self.hidden_channels < 1 or self.channels < 1:
            raise ValueError("irbs_per_rdm, hidden_channels and channels must be positive")
        if self.clamp_alpha <= 0:
            raise ValueError("clamp_alpha must be > 0")

    @property
    def num_rdm(self):
        return int(round(math.log2(self.scale)))

    @classmethod
    def preset(cls, name, **overrides):
        try:
            base = PRESETS[name.upper()]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
        return cls(**{**base, **overrides})

    def to_dict(self):
        return asdict(self)


# -- parameter containers -----------------------------------------------------


class Module:
    """Minimal parameter container: attributes that are trainable tensors,
    sub-modules or lists of sub-modules are discovered in definition order."""

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.numpy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match parameter shape {p.shape}")
            self._assign(name, Tensor(arr, requires_grad=True, dtype=p.dtype))

    def _assign(self, dotted, value):
        *path, last = dotted.split(".")
        obj = self
        for part in path:
            obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
        setattr(obj, last, value)

    def astype(self, dtype):
        """Cast every parameter to ``dtype`` in place; returns self."""
        for name, p in list(self.named_parameters()):
            self._assign(name, Tensor(p.data, requires_grad=True, dtype=dtype))
        return self


def _he_std(fan_in, slope):
    return math.sqrt(2.0 / (1.0 + slope * slope)) / math.sqrt(fan_in)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, rng, kernel=3, std=None):
        shape = (out_ch, in_ch, kernel, kernel)
        dtype = T.default_dtype()
        if std is None or std == 0:
            w = np.zeros(shape)
        else:
            w = rng.standard_normal(shape) * std
        self.weight = Tensor(w, requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True, dtype=dtype)
        self.padding = kernel // 2

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class EnhancedBlock(Module):
    """Convolutional sub-network used inside the coupling blocks.

    Layout: ``conv_in -> act -> body -> conv_out`` with ``body(h) = act(conv_mid(h))``;
    ``conv_in`` and ``conv_mid`` are 3x3, ``conv_out`` is a 1x1 projection.
    PCB stacks the body plainly, RB wraps it in an identity skip
    (``h + body(h)``), and RBPlus halves the hidden width and runs the skipped
    body on only half of those channels before concatenating them back.

    ``final_std`` sets the init of ``conv_out``; 0 gives an all-zero output.
    """

    def __init__(self, cfg: EbConfig, rng, final_std=0.0):
        self.cfg = cfg
        width = cfg.hidden_channels // 2 if cfg.kind == "RBPlus" else cfg.hidden_channels
        self._width = width
        self._body = width // 2 if cfg.kind == "RBPlus" else width
        self.conv_in = Conv2d(cfg.in_channels, width, rng, std=_he_std(cfg.in_channels * 9, cfg.slope))
        self.conv_mid = Conv2d(self._body, self._body, rng, std=_he_std(self._body * 9, cfg.slope))
        self.conv_out = Conv2d(width, cfg.out_channels, rng, kernel=1, std=final_std)

    def __call__(self, x):
        cfg = self.cfg
        if x.shape[1] != cfg.in_channels:
            raise ValueError(f"EB expects {cfg.in_channels} input channels, got shape {x.shape}")
        h = T.leaky_relu(self.conv_in(x), cfg.slope)
        if cfg.kind == "PCB":
            h = self._body_fn(h)
        elif cfg.kind == "RB":
            h = h + self._body_fn(h)
        else:
            a, b = T.split(h, [self._body, self._width - self._body])
            h = T.cat([a + self._body_fn(a), b])
        return self.conv_out(h)

    def _body_fn(self, h):
        return T.leaky_relu(self.conv_mid(h), self.cfg.slope)


def _clamped_scale(v, alpha):
    # exp(alpha * tanh(v)) lies in [e^-alpha, e^alpha]
    return T.exp(T.tanh(v) * alpha)


class InvertibleResidualBlock(Module):
    """Affine coupling between the high branch ``u1`` (3C) and low branch ``u2`` (C).

    ThreeEb::

        u2' = u2 + EB1(u1)
        s   = exp(a * tanh(EB2(u2')))
        u1' = u1 * s + EB3(u2')

    LiteralEq3 (one EB output used as both scale and shift)::

        v1  = exp(a * tanh(EBa(u2)));   u1' = u1 * v1 + v1
        v2  = exp(a * tanh(EBb(u1')));  u2' = u2 * v2 + v2
    """

    def __init__(self, mode, channels, hidden, kind, alpha, slope, rng, final_std=0.0):
        if mode not in COUPLING_MODES:
            raise ValueError(f"unknown coupling mode {mode!r}")
        self._mode = mode
        self._alpha = alpha
        hi, lo = 3 * channels, channels

        def eb(i, o):
            return EnhancedBlock(EbConfig(kind, i, hidden, o, slope), rng, final_std)

        if mode == "ThreeEb":
            self.eb1 = eb(hi, lo)
            self.eb2 = eb(lo, hi)
            self.eb3 = eb(lo, hi)
        else:
            self.eb_a = eb(lo, hi)
            self.eb_b = eb(hi, lo)

    def _check(self, u1, u2):
        if u1.shape[1] != 3 * u2.shape[1] or u1.shape[0] != u2.shape[0] or u1.shape[2:] != u2.shape[2:]:
            raise ValueError(f"IRB: high branch {u1.shape} and low branch {u2.shape} are inconsistent")

    def forward(self, u1, u2):
        self._check(u1, u2)
        a = self._alpha
        if self._mode == "ThreeEb":
            u2 = u2 + self.eb1(u1)
            s = _clamped_scale(self.eb2(u2), a)
            u1 = u1 * s + self.eb3(u2)
        else:
            v1 = _clamped_scale(self.eb_a(u2), a)
            u1 = u1 * v1 + v1
            v2 = _clamped_scale(self.eb_b(u1), a)
            u2 = u2 * v2 + v2
        return u1, u2

    def inverse(self, u1, u2):
        self._check(u1, u2)
        a = self._alpha
        if self._mode == "ThreeEb":
            s = _clamped_scale(self.eb2(u2), a)
            u1 = T.div(u1 - self.eb3(u2), s, strict=False)
            u2 = u2 - self.eb1(u1)
        else:
            v2 = _clamped_scale(self.eb_b(u1), a)
            u2 = T.div(u2 - v2, v2, strict=False)
            v1 = _clamped_scale(self.eb_a(u2), a)
            u1 = T.div(u1 - v1, v1, strict=False)
        return u1, u2


class ResidualDownscalingModule(Module):
    """One 2x stage: residual Haar split followed by a stack of coupling blocks."""

    def __init__(self, cfg: ModelConfig, rng, final_std=0.0):
        self._long_skip = cfg.long_skip
        self.irbs = [
            InvertibleResidualBlock(cfg.coupling_mode, cfg.channels, cfg.hidden_channels, cfg.eb_kind,
                                    cfg.clamp_alpha, cfg.slope, rng, final_std)
            for _ in range(cfg.irbs_per_rdm)
        ]

    def forward(self, x):
        if self._long_skip:
            u2, u1 = residual_decompose(x)
        else:
            bands = haar_forward(x)
            u2, u1 = bands.low * 0.5, bands.high
        for irb in self.irbs:
            u1, u2 = irb.forward(u1, u2)
        return u2, u1

    def inverse(self, y, z):
        if y.data.ndim != 4 or z.shape != (y.shape[0], 3 * y.shape[1], *y.shape[2:]):
            raise ValueError(f"RDM inverse: y shape {y.shape} inconsistent with z shape {z.shape}")
        u1, u2 = z, y
        for irb in reversed(self.irbs):
            u1, u2 = irb.inverse(u1, u2)
        if self._long_skip:
            return residual_recompose(u2, u1)
        return haar_inverse(WaveletBands(u2 * 2.0, u1))


@dataclass
class LatentPyramid:
    """Per-level latent tensors, finest level first."""

    levels: list = field(default_factory=list)

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    @property
    def shapes(self):
        return [z.shape for z in self.levels]


class IRRM(Module):
    """The full invertible rescaling model: ``x <-> (y, z)``.

    ``init`` controls how each EB's output convolution starts:

    * ``"default"`` -- zeros when ``long_skip`` is on (identity map at step 0),
      small random values otherwise;
    * ``"random"`` -- every layer random, for invertibility and gradient checks.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed=0, init="default"):
        if init not in ("default", "random"):
            raise ValueError(f"unknown init {init!r}")
        self.config = cfg
        rng = np.random.default_rng(seed)
        fan = cfg.hidden_channels
        if init == "random":
            # kept small: deep stacks of the literal coupling grow geometrically otherwise
            final_std = 0.01 * _he_std(fan, cfg.slope)
        elif cfg.long_skip:
            final_std = 0.0
        else:
            final_std = 0.1 * _he_std(fan, cfg.slope)
        self.rdms = [ResidualDownscalingModule(cfg, rng, final_std) for _ in range(cfg.num_rdm)]

    def _check_input(self, x):
        if x.data.ndim != 4:
            raise ValueError(f"expected a (n, c, h, w) tensor, got shape {x.shape}")
        s = self.config.scale
        n, c, h, w = x.shape
        if c != self.config.channels:
            raise ValueError(f"model expects {self.config.channels} channels, got {c}")
        if h % s or w % s:
            ph, pw = (-h) % s, (-w) % s
            raise ValueError(f"input size {h}x{w} is not divisible by scale {s}; pad by ({ph}, {pw}) pixels")

    def forward(self, x):
        self._check_input(x)
        levels = []
        y = x
        for rdm in self.rdms:
            y, z = rdm.forward(y)
            levels.append(z)
        return y, LatentPyramid(levels)

    def inverse(self, y, z):
        levels = list(z)
        if len(levels) != len(self.rdms):
            raise ValueError(f"latent pyramid has {len(levels)} levels, model has {len(self.rdms)} modules")
        n, c, h, w = y.shape
        depth = len(levels)
        for k in range(1, depth + 1):
            expected = (n, 3 * c, h << (depth - k), w << (depth - k))
            if levels[k - 1].shape != expected:
                raise ValueError(f"latent level {k} has shape {levels[k - 1].shape}, expected {expected}")
        x = y
        for rdm, zl in zip(reversed(self.rdms), reversed(levels)):
            x = rdm.inverse(x, zl)
        return x

    __call__ = forward

    def latent_shapes(self, batch, height, width):
        c = self.config.channels
        return [(batch, 3 * c, height >> k, width >> k) for k in range(1, self.config.num_rdm + 1)]


def model_forward(m: IRRM, x: Tensor):
    return m.forward(x)


def model_inverse(m: IRRM, y: Tensor, z: LatentPyramid):
    return m.inverse(y, z)


def sample_latents(m: IRRM, batch, height, width, sigma, seed=None, dtype=None):
    """Draw i.i.d. N(0, sigma^2) latents for every level of ``m``.

    The same seed gives the same standard-normal draw for every sigma, so a
    sigma sweep scales one fixed noise pattern.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    dtype = dtype or T.default_dtype()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    levels = []
    for shape in m.latent_shapes(batch, height, width):
        eps = rng.standard_normal(shape)
        levels.append(Tensor(eps * sigma if sigma else np.zeros(shape), dtype=dtype))
    return LatentPyramid(levels)


def count_params(m: Module):
    return int(np.sum([p.size for p in m.parameters()], dtype=np.int64))


def describe(m: IRRM):
    """Per-tensor summary rows: ``{"name", "shape", "count"}``."""
    return [{"name": n, "shape": tuple(p.shape), "count": int(p.size)} for n, p in m.named_parameters()]


def macs_per_pixel(m: IRRM):
    """Multiply-accumulates of one forward pass per high-resolution pixel."""
    total = 0.0
    for k, rdm in enumerate(m.rdms, start=1):
        for name, p in rdm.named_parameters():
            if name.endswith(".weight"):
                o, i, kh, kw = p.shape
                total += o * i * kh * kw / 4 ** k
    return total


def config_from_dict(d):
    fields = ModelConfig.__dataclass_fields__
    unknown = set(d) - set(fields)
    if unknown:
        raise KeyError(f"unknown model config keys: {sorted(unknown)}")
    return replace(ModelConfig(), **d)
