"""``irrm`` command-line tool.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields

import numpy as np

from . import checkpoint as ckpt
from .imageio import (ImageError, array_to_image, image_to_array, list_pngs, load_png, save_png)
from .metrics import bicubic_resize, psnr, ssim
from .model import IRRM, ModelConfig, count_params, describe, macs_per_pixel, sample_latents
from .tensor import Tensor, no_grad
from .train import NonFiniteLossError, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- configuration ---------------------------------------------------------------------

_MODEL_FIELDS = {f.name: f.type for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)}
CONFIG_KEYS = {"preset": "str", **_MODEL_FIELDS, **_TRAIN_FIELDS}


def _convert(key, raw):
    kind = CONFIG_KEYS[key]
    kind = getattr(kind, "__name__", kind)
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None
    return raw.strip()


def parse_config_text(text, source="<config>"):
    """Flat ``key = value`` lines, ``#`` comments; unknown keys are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _convert(key, value)
    return out


def load_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config_text(fh.read(), path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None


def resolve_config(values):
    """Split a flat mapping into ``(ModelConfig, TrainConfig)``; presets apply first."""
    values = dict(values)
    preset = values.pop("preset", None)
    model_kw = {k: v for k, v in values.items() if k in _MODEL_FIELDS}
    train_kw = {k: v for k, v in values.items() if k in _TRAIN_FIELDS}
    try:
        mcfg = ModelConfig.preset(preset, **model_kw) if preset else ModelConfig(**model_kw)
        tcfg = TrainConfig(**train_kw)
        tcfg.check_scale(mcfg.scale)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return mcfg, tcfg


def format_config(mcfg, tcfg):
    lines = [f"{k} = {v}" for k, v in mcfg.to_dict().items()]
    lines += [f"{k} = {v}" for k, v in tcfg.to_dict().items()]
    return "\n".join(lines) + "\n"


def _overrides(pairs):
    text = "\n".join(pairs or [])
    return parse_config_text(text, "--set")


# -- helpers ---------------------------------------------------------------------------------


def _load_model(path):
    try:
        model, _, _ = ckpt.load_checkpoint(path)
    except ckpt.CheckpointError as exc:
        raise DataError(str(exc)) from None
    return model


def _load_image_tensor(path):
    """PNG or float tensor-table image -> (1, 3, h, w) float32 tensor."""
    if path.lower().endswith(".png"):
        return Tensor(image_to_array(load_png(path))[None])
    try:
        header, tensors = ckpt.load_tensors(path)
    except ckpt.CheckpointError as exc:
        raise DataError(str(exc)) from None
    if header.get("kind") != "image" or "image" not in tensors:
        raise DataError(f"{path}: not an image file")
    arr = tensors["image"]
    return Tensor(arr[None] if arr.ndim == 3 else arr)


def _save_image(arr, path, quantize):
    arr = np.asarray(arr)
    if path.lower().endswith(".png"):
        save_png(array_to_image(np.clip(arr, 0.0, 1.0)), path)
        return
    if quantize:
        arr = np.clip(np.rint(arr * 255.0), 0, 255) / 255.0
    ckpt.save_tensors(path, {"kind": "image"}, {"image": arr})


def _check_divisible(x, scale, path):
    h, w = x.shape[2:]
    if h % scale or w % scale:
        raise DataError(f"{path}: size {w}x{h} is not divisible by scale {scale}")


def _image_paths(directory):
    if not os.path.isdir(directory):
        raise DataError(f"{directory}: not a directory")
    paths = list_pngs(directory)
    if not paths:
        raise DataError(f"{directory}: no PNG images found")
    return paths


def _threads():
    raw = os.environ.get("IRRM_THREADS")
    cap = os.cpu_count() or 1
    if raw:
        try:
            cap = max(1, int(raw))
        except ValueError:
            raise UsageError(f"IRRM_THREADS must be an integer, got {raw!r}") from None
    return cap


# -- commands ---------------------------------------------------------------------------------


def cmd_train(args):
    values = load_config_file(args.config) if args.config else {}
    values.update(_overrides(args.set))
    if args.seed is not None:
        values["seed"] = args.seed
    if args.steps is not None:
        values["total_steps"] = args.steps
    mcfg, tcfg = resolve_config(values)
    resolved = format_config(mcfg, tcfg)
    print(resolved, end="")

    paths = _image_paths(args.data)
    dataset = [image_to_array(load_png(p)) for p in paths]
    try:
        os.makedirs(args.out, exist_ok=True)
        ckpt.atomic_write(os.path.join(args.out, "config.txt"), resolved.encode("utf-8"))
    except OSError as exc:
        raise DataError(f"{args.out}: cannot write output directory ({exc})") from None

    model = IRRM(mcfg, seed=tcfg.seed)
    every = max(1, args.log_every)

    def report(rec):
        if rec["step"] % every == 0 or rec["step"] == tcfg.total_steps - 1:
            print(f"step {rec['step']}\tloss {rec['loss']:.6g}\tgrad_norm {rec['grad_norm']:.4g}", file=sys.stderr)

    try:
        train(model, dataset, tcfg, out_dir=args.out, resume=args.resume, on_step=report)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    print(f"checkpoint: {os.path.join(args.out, 'checkpoint.irrm')}")
    return EXIT_OK


def cmd_downscale(args):
    model = _load_model(args.model)
    x = _load_image_tensor(args.input)
    _check_divisible(x, model.config.scale, args.input)
    with no_grad():
        y, z = model.forward(x)
    quantize = args.quantize_lr or args.out_lr.lower().endswith(".png")
    _save_image(y.numpy()[0], args.out_lr, quantize)
    if args.out_z:
        ckpt.save_latents(args.out_z, z, extra={"scale": model.config.scale})
    print(f"{args.out_lr}\t{y.shape[3]}x{y.shape[2]}")
    return EXIT_OK


def cmd_upscale(args):
    model = _load_model(args.model)
    y = _load_image_tensor(args.in_lr)
    _, _, h, w = y.shape
    s = model.config.scale
    if args.z:
        try:
            z, _ = ckpt.load_latents(args.z)
        except ckpt.CheckpointError as exc:
            raise DataError(str(exc)) from None
    else:
        z = sample_latents(model, 1, h * s, w * s, args.sample_sigma, seed=args.seed)
    with no_grad():
        try:
            x = model.inverse(y, z)
        except ValueError as exc:
            raise DataError(str(exc)) from None
    _save_image(x.numpy()[0], args.out, quantize=False)
    print(f"{args.out}\t{w * s}x{h * s}")
    return EXIT_OK


def evaluate_image(model, x, draws, sigma, seed, crop_border, quantize_lr, index=0, scale=None):
    """PSNR/SSIM of ``draws`` reconstructions of one (1, 3, h, w) array.

    ``model=None`` gives the bicubic down/up baseline. Returns a list of
    ``(psnr, ssim)`` per draw.
    """
    results = []
    if model is None:
        rec = bicubic_resize(bicubic_resize(x, 1 / scale), scale)
        for _ in range(draws):
            results.append(_score(rec, x, crop_border))
        return results
    with no_grad():
        y, _ = model.forward(Tensor(x))
        if quantize_lr:
            y = Tensor(np.clip(np.rint(y.numpy() * 255.0), 0, 255) / 255.0)
        for d in range(draws):
            rng = np.random.default_rng([seed, index, d])
            z = sample_latents(model, 1, x.shape[2], x.shape[3], sigma, seed=rng)
            results.append(_score(model.inverse(y, z).numpy(), x, crop_border))
    return results


def _score(rec, x, crop_border):
    img = array_to_image(np.clip(rec[0], 0.0, 1.0))
    ref = array_to_image(x[0])
    return psnr(img, ref, crop_border), ssim(img, ref, crop_border)


def cmd_eval(args):
    if args.model is None and not args.bicubic:
        raise UsageError("eval needs --model or --bicubic")
    if args.draws < 1:
        raise UsageError("--draws must be >= 1")
    model = _load_model(args.model) if args.model else None
    scale = model.config.scale if model else args.scale
    crop = scale if args.crop_border is None else args.crop_border
    paths = _image_paths(args.data)
    images = []
    for p in paths:
        x = image_to_array(load_png(p))[None]
        _check_divisible(x, scale, p)
        images.append(x)

    def job(i):
        return evaluate_image(model, images[i], args.draws, args.sigma, args.seed, crop, args.quantize_lr, i, scale)

    with ThreadPoolExecutor(max_workers=min(_threads(), len(images))) as pool:
        per_image = list(pool.map(job, range(len(images))))

    lines = ["file\tpsnr_db\tssim"]
    spreads, psnrs, ssims = [], [], []
    for path, draws in zip(paths, per_image):
        p = [d[0] for d in draws]
        q = [d[1] for d in draws]
        spread = max(p) - min(p) if all(map(math.isfinite, p)) else 0.0
        spreads.append(spread)
        psnrs.append(float(np.mean(p)))
        ssims.append(float(np.mean(q)))
        lines.append(f"{os.path.basename(path)}\t{psnrs[-1]:.4f}\t{ssims[-1]:.6f}")
    lines.append(f"MEAN\t{np.mean(psnrs):.4f}\t{np.mean(ssims):.6f}")
    lines.append(f"# draws={args.draws} sigma={args.sigma} crop_border={crop} max_psnr_spread_db={max(spreads):.4f}")
    for path, spread in zip(paths, spreads):
        lines.append(f"# spread\t{os.path.basename(path)}\t{spread:.4f}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.report:
        ckpt.atomic_write(args.report, text.encode("utf-8"))
    return EXIT_OK


def cmd_inspect(args):
    if args.model:
        model = _load_model(args.model)
    else:
        values = load_config_file(args.config) if args.config else {}
        values.update(_overrides(args.set))
        mcfg, _ = resolve_config(values)
        model = IRRM(mcfg)
    cfg = model.config
    print(f"coupling_mode\t{cfg.coupling_mode}")
    print(f"eb_kind\t{cfg.eb_kind}")
    for k, v in cfg.to_dict().items():
        if k not in ("coupling_mode", "eb_kind"):
            print(f"{k}\t{v}")
    print(f"num_rdm\t{cfg.num_rdm}")
    if args.verbose:
        for row in describe(model):
            print(f"tensor\t{row['name']}\t{'x'.join(map(str, row['shape']))}\t{row['count']}")
    print(f"params\t{count_params(model)}")
    mpp = macs_per_pixel(model)
    print(f"macs_per_hr_pixel\t{mpp:.1f}")
    h, w = args.size
    print(f"macs_{w}x{h}\t{int(round(mpp * h * w))}")
    return EXIT_OK


def _sigma_tag(sigma):
    return f"{sigma:g}".replace(".", "p").replace("-", "m")


def cmd_zsweep(args):
    try:
        sigmas = [float(s) for s in args.sigmas.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sigmas must be a comma-separated list of numbers, got {args.sigmas!r}") from None
    if not sigmas or any(s < 0 for s in sigmas):
        raise UsageError("--sigmas needs at least one value, all >= 0")
    model = _load_model(args.model)
    x = _load_image_tensor(args.input)
    _check_divisible(x, model.config.scale, args.input)
    os.makedirs(args.out, exist_ok=True)
    _, _, h, w = x.shape
    outputs = {}
    with no_grad():
        y, _ = model.forward(x)
        base = np.clip(model.inverse(y, sample_latents(model, 1, h, w, 0.0)).numpy(), 0, 1)
        for s in sigmas:
            z = sample_latents(model, 1, h, w, s, seed=args.seed)
            rec = np.clip(model.inverse(y, z).numpy(), 0, 1)
            outputs[s] = rec
            save_png(array_to_image(rec), os.path.join(args.out, f"recon_sigma{_sigma_tag(s)}.png"))
    lines = ["sigma\tpsnr_vs_sigma0_db"]
    for s in sigmas:
        value = psnr(outputs[s], base, crop_border=0)
        lines.append(f"{s:g}\t{'inf' if math.isinf(value) else f'{value:.4f}'}")
    text = "\n".join(lines) + "\n"
    ckpt.atomic_write(os.path.join(args.out, "zsweep.tsv"), text.encode("utf-8"))
    print(text, end="")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def build_parser():
    p = _Parser(prog="irrm", description="Invertible residual rescaling: train, downscale, upscale, evaluate.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model on a directory of PNGs")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--data", required=True, help="directory of training PNGs")
    t.add_argument("--out", required=True, help="output directory (checkpoint, log, resolved config)")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="override total_steps")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint written by train")
    t.add_argument("--log-every", type=int, default=100, help="progress line interval on stderr")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("downscale", help="HR image -> LR image + latent file")
    d.add_argument("--model", required=True)
    d.add_argument("--in", dest="input", required=True, help="HR PNG")
    d.add_argument("--out-lr", required=True, help="LR output (.png, or .irrm for unquantized floats)")
    d.add_argument("--out-z", help="latent pyramid output")
    d.add_argument("--quantize-lr", action="store_true", help="round the LR to 8 bits even for .irrm output")
    d.set_defaults(func=cmd_downscale)

    u = sub.add_parser("upscale", help="LR image (+ latents) -> HR image")
    u.add_argument("--model", required=True)
    u.add_argument("--in-lr", required=True, help="LR input (.png or .irrm)")
    g = u.add_mutually_exclusive_group()
    g.add_argument("--z", help="stored latent pyramid")
    g.add_argument("--sample-sigma", type=float, default=0.0, help="draw z ~ N(0, sigma^2) (default 0)")
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--out", required=True, help="HR output (.png or .irrm)")
    u.set_defaults(func=cmd_upscale)

    for name in ("eval", "roundtrip"):
        e = sub.add_parser(name, help="PSNR/SSIM of downscale + upscale over several z draws")
        e.add_argument("--model")
        e.add_argument("--bicubic", action="store_true", help="evaluate the bicubic down/up baseline instead")
        e.add_argument("--scale", type=int, default=2, help="scale for --bicubic (default 2)")
        e.add_argument("--data", required=True)
        e.add_argument("--draws", type=int, default=1)
        e.add_argument("--sigma", type=float, default=1.0, help="latent std at upscale (default 1)")
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--crop-border", type=int, help="pixels cropped before scoring (default: scale)")
        e.add_argument("--no-quantize-lr", dest="quantize_lr", action="store_false",
                       help="keep the LR in floating point instead of rounding to 8 bits")
        e.add_argument("--report", help="also write the table to this file")
        e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="parameter and cost report")
    src = i.add_mutually_exclusive_group()
    src.add_argument("--model")
    src.add_argument("--config")
    i.add_argument("--set", action="append", metavar="KEY=VALUE")
    i.add_argument("--size", type=_size, default=(64, 64), metavar="HxW", help="image size for the MAC total")
    i.add_argument("-v", "--verbose", action="store_true", help="list every tensor")
    i.set_defaults(func=cmd_inspect)

    z = sub.add_parser("zsweep", help="reconstructions for a list of latent scales")
    z.add_argument("--model", required=True)
    z.add_argument("--in", dest="input", required=True)
    z.add_argument("--sigmas", default="0,0.25,0.5,1")
    z.add_argument("--seed", type=int, default=0)
    z.add_argument("--out", required=True)
    z.set_defaults(func=cmd_zsweep)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"irrm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"irrm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ImageError, ckpt.CheckpointError, FileNotFoundError, IsADirectoryError,
            PermissionError) as exc:
        print(f"irrm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"irrm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
