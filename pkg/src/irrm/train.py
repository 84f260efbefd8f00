"""Training objective, Adam, patch sampling and the training loop."""
import math
import os
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import bicubic_resize
from .model import IRRM, LatentPyramid, sample_latents
from .tensor import Tensor


class NonFiniteLossError(FloatingPointError):
    """Raised when a training step produces a NaN/inf loss or gradient."""

    def __init__(self, step, what):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 8.0
    lambda2: float = 8.0
    lambda3: float = 1.0
    lr0: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    halve_every: int = 10000
    batch: int = 4
    patch: int = 64
    augment_flip: bool = True
    augment_rotate: bool = True
    seed: int = 0
    total_steps: int = 2000
    clip_norm: float = 5.0  # 0 disables clipping
    latent_sigma: float = 1.0
    ckpt_every: int = 500

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.halve_every < 1 or self.batch < 1 or self.patch < 1 or self.total_steps < 0:
            raise ValueError("halve_every, batch and patch must be positive; total_steps >= 0")
        if self.clip_norm < 0 or self.latent_sigma < 0 or self.ckpt_every < 0:
            raise ValueError("clip_norm, latent_sigma and ckpt_every must be >= 0")

    def check_scale(self, scale):
        if self.patch % scale:
            raise ValueError(f"patch {self.patch} is not divisible by scale {scale}")

    def to_dict(self):
        return asdict(self)


# -- losses ------------------------------------------------------------------------


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def loss_back(x_back: Tensor, x: Tensor) -> Tensor:
    """Mean absolute reconstruction error."""
    _same_shape("loss_back", x_back, x)
    return T.mean(T.abs(x_back - x))


def loss_forw(y_forw: Tensor, y_gt: Tensor) -> Tensor:
    """Mean squared error against the reference low-resolution image."""
    _same_shape("loss_forw", y_forw, y_gt)
    return T.mean(T.square(y_forw - y_gt))


def loss_latent(z: LatentPyramid) -> Tensor:
    """Mean of z^2 over every entry of every level."""
    levels = list(z)
    if not levels:
        return T.zeros((1, 1, 1, 1))
    total = sum(z_l.size for z_l in levels)
    acc = T.sum(T.square(levels[0]))
    for z_l in levels[1:]:
        acc = acc + T.sum(T.square(z_l))
    return acc * (1.0 / total)


def total_loss(m: IRRM, x: Tensor, y_gt: Tensor, sampled_z: LatentPyramid, cfg: TrainConfig = TrainConfig()):
    """Weighted objective; returns ``(loss, terms)`` where ``terms`` holds float values."""
    y, z = m.forward(x)
    x_back = m.inverse(y, sampled_z)
    lb, lf, ll = loss_back(x_back, x), loss_forw(y, y_gt), loss_latent(z)
    loss = lb * cfg.lambda1 + lf * cfg.lambda2 + ll * cfg.lambda3
    return loss, {"l_back": lb.item(), "l_forw": lf.item(), "l_latent": ll.item()}


# -- optimisation --------------------------------------------------------------------


def lr_at(step, cfg: TrainConfig = TrainConfig()):
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return cfg.lr0 * 0.5 ** (step // cfg.halve_every)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional bias-corrected Adam update.

    ``params`` and ``grads`` map names to arrays; ``state`` is
    ``{"step": int, "m": {...}, "v": {...}}`` (moments created lazily).
    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient for {name!r}; step aborted")
    t = state.get("step", 0) + 1
    m_old, v_old = state.get("m", {}), state.get("v", {})
    new_params, m_new, v_new = {}, {}, {}
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = beta1 * m_old.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * v_old.get(name, 0.0) + (1.0 - beta2) * g * g
        m_new[name], v_new[name] = m, v
        new_params[name] = (p - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return new_params, {"step": t, "m": m_new, "v": v_new}


class Adam:
    """Stateful wrapper around :func:`adam_step` bound to a model."""

    def __init__(self, model, cfg: TrainConfig = TrainConfig()):
        self.model = model
        self.cfg = cfg
        self.step_count = 0
        self.m = {}
        self.v = {}

    def load_state(self, state):
        own = dict(self.model.named_parameters())
        for key in ("m", "v"):
            for name, arr in state[key].items():
                if name not in own or own[name].shape != arr.shape:
                    raise ValueError(f"optimizer moment {name!r} does not match the model")
        self.step_count = state["step"]
        self.m = {k: np.asarray(v, dtype=np.float32) for k, v in state["m"].items()}
        self.v = {k: np.asarray(v, dtype=np.float32) for k, v in state["v"].items()}

    def step(self, grads, lr):
        named = dict(self.model.named_parameters())
        params = {k: p.data for k, p in named.items()}
        new, state = adam_step(params, grads, {"step": self.step_count, "m": self.m, "v": self.v}, lr,
                               self.cfg.beta1, self.cfg.beta2, self.cfg.eps_adam)
        self.step_count = state["step"]
        self.m = {k: v.astype(np.float32) for k, v in state["m"].items()}
        self.v = {k: v.astype(np.float32) for k, v in state["v"].items()}
        self.model.load_state_dict(new)


def collect_grads(model):
    out = {}
    for name, p in model.named_parameters():
        out[name] = p.grad if p.grad is not None else np.zeros(p.shape, dtype=p.dtype)
    return out


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grads(grads, max_norm):
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns (grads, norm)."""
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        f = max_norm / (norm + 1e-6)
        grads = {k: (g * f).astype(g.dtype) for k, g in grads.items()}
    return grads, norm


# -- data ------------------------------------------------------------------------------


def dihedral(img, k):
    """k in 0..7: rotate by 90*(k % 4) degrees, then mirror horizontally if k >= 4."""
    out = np.rot90(img, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return out


def usable_images(dataset, patch):
    keep = []
    for i, img in enumerate(dataset):
        if img.shape[-2] < patch or img.shape[-1] < patch:
            warnings.warn(f"image {i} ({img.shape[-2]}x{img.shape[-1]}) is smaller than the {patch} patch; skipped")
            continue
        keep.append(img)
    return keep


def augment_choices(cfg):
    if cfg.augment_flip and cfg.augment_rotate:
        return 8
    if cfg.augment_rotate:
        return 4
    return 1


def sample_batch(dataset, cfg: TrainConfig, rng, scale=2, dtype=None):
    """Random crops (optionally dihedrally augmented) and their bicubic references.

    ``dataset`` is a list of (C, H, W) arrays in [0, 1]. Returns Tensors
    ``(x, y_gt)`` of shape (batch, C, patch, patch) and (batch, C, patch/scale, patch/scale).
    """
    cfg.check_scale(scale)
    images = usable_images(dataset, cfg.patch)
    if not images:
        raise ValueError("no image in the dataset is at least patch-sized")
    n_aug = augment_choices(cfg)
    p = cfg.patch
    crops = []
    for _ in range(cfg.batch):
        img = images[rng.integers(len(images))]
        top = rng.integers(img.shape[-2] - p + 1)
        left = rng.integers(img.shape[-1] - p + 1)
        crop = img[:, top:top + p, left:left + p]
        if n_aug > 1:
            k = int(rng.integers(n_aug))
        elif cfg.augment_flip:
            k = 4 * int(rng.integers(2))
        else:
            k = 0
        crops.append(dihedral(crop, k))
    x = np.stack(crops).astype(np.float64)
    y_gt = bicubic_resize(x, 1 / scale)
    return Tensor(x, dtype=dtype), Tensor(y_gt, dtype=dtype)


# -- loop -------------------------------------------------------------------------------

LOG_FIELDS = ("step", "loss", "l_back", "l_forw", "l_latent", "grad_norm", "lr")


def format_log_line(rec):
    return "\t".join([str(rec["step"])] + [f"{rec[k]:.9g}" for k in LOG_FIELDS[1:]]) + "\n"


def parse_log(path):
    records = []
    with open(path) as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(LOG_FIELDS):
                continue
            rec = {k: float(v) for k, v in zip(LOG_FIELDS, parts)}
            rec["step"] = int(parts[0])
            records.append(rec)
    return records


def train_step(m, opt, dataset, cfg, step):
    """One optimisation step; returns the log record (does not write anything)."""
    rng = np.random.default_rng([cfg.seed, step])
    x, y_gt = sample_batch(dataset, cfg, rng, scale=m.config.scale)
    z = sample_latents(m, cfg.batch, cfg.patch, cfg.patch, cfg.latent_sigma, seed=rng)
    m.zero_grad()
    loss, terms = total_loss(m, x, y_gt, z, cfg)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLossError(step, "loss")
    loss.backward()
    grads, norm = clip_grads(collect_grads(m), cfg.clip_norm)
    if not math.isfinite(norm):
        raise NonFiniteLossError(step, "gradient norm")
    lr = lr_at(step, cfg)
    opt.step(grads, lr)
    return {"step": step, "loss": value, **terms, "grad_norm": norm, "lr": lr}


CHECKPOINT_NAME = "checkpoint.irrm"
LOG_NAME = "train.log"


def train(m: IRRM, dataset, cfg: TrainConfig = TrainConfig(), out_dir=None, resume=None, on_step=None):
    """Run the training loop; returns the list of per-step records.

    With ``out_dir`` the log is appended to ``train.log`` and a checkpoint is
    written every ``ckpt_every`` steps and at the end. A non-finite loss
    raises :class:`NonFiniteLossError`, leaving the last good checkpoint intact.
    ``resume`` is a checkpoint path; training continues from its stored step
    and the returned model replaces ``m`` (use the ``model`` key of the result).
    """
    cfg.check_scale(m.config.scale)
    opt = Adam(m, cfg)
    start = 0
    if resume is not None:
        m, opt_state, header = load_checkpoint(resume)
        opt = Adam(m, cfg)
        if opt_state is not None:
            opt.load_state(opt_state)
        start = int(header.get("next_step", 0))
    dataset = usable_images(dataset, cfg.patch)
    if not dataset:
        raise ValueError("dataset is empty after dropping undersized images")
    log_path = ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, LOG_NAME)
        ckpt_path = os.path.join(out_dir, CHECKPOINT_NAME)
        if resume is None and os.path.exists(log_path):
            os.unlink(log_path)
    records = []
    for step in range(start, cfg.total_steps):
        rec = train_step(m, opt, dataset, cfg, step)
        records.append(rec)
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(format_log_line(rec))
        done = step + 1
        if ckpt_path and ((cfg.ckpt_every and done % cfg.ckpt_every == 0) or done == cfg.total_steps):
            save_checkpoint(ckpt_path, m, opt, extra={"next_step": done, "seed": cfg.seed})
        if on_step is not None:
            on_step(rec)
    return TrainResult(m, opt, records)


@dataclass
class TrainResult:
    model: IRRM
    optimizer: Adam
    records: list


def config_field_types():
    return {f.name: f.type for f in fields(TrainConfig)}
