"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import autodiff as ad
from . import checkpoint as ckpt
from . import gradcheck, imgio, metrics, nets, plotting, trainer

log = logging.getLogger("retinex_llie")


class UsageError(Exception):
    pass


# option dest -> (type, default); None default means "required"
TRAIN_OPTS = {
    "data": (str, None), "out": (str, None), "steps": (int, 1000), "patch": (int, 64),
    "batch": (int, 4), "seed": (int, 0), "lr": (float, 1e-4), "ncbc_noise_weight": (float, 0.2),
    "resume": (str, ""), "decom": (str, ""), "checkpoint_every": (int, 0),
    "base_channels": (int, 16), "depth": (int, 4), "figures": (bool, True),
}
ENHANCE_OPTS = {"decom": (str, None), "enh": (str, None), "input": (str, None), "output": (str, None)}
DECOMPOSE_OPTS = {"decom": (str, None), "input": (str, None), "outdir": (str, None), "figures": (bool, True)}
EVAL_OPTS = {"dir_a": (str, None), "dir_b": (str, None), "report": (str, None), "figures": (bool, True)}
GRADCHECK_OPTS = {"seed": (int, 0), "precision": (int, 32), "inject_fault": (str, "")}

COMMAND_OPTS = {"train": TRAIN_OPTS, "enhance": ENHANCE_OPTS, "decompose": DECOMPOSE_OPTS,
                "eval": EVAL_OPTS, "gradcheck": GRADCHECK_OPTS}


def _parse_bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Dashes in keys become underscores."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults <- config file <- flags, rejecting unknown keys and missing required ones."""
    opts = COMMAND_OPTS[command]
    settings = {}
    file_vals = read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = sorted(set(file_vals) - set(opts))
    if unknown:
        raise UsageError(f"unknown config keys for '{command}': {', '.join(unknown)}")
    for key, (typ, default) in opts.items():
        val = getattr(args, key, None)
        if val is None and key in file_vals:
            try:
                val = _parse_bool(file_vals[key]) if typ is bool else typ(file_vals[key])
            except ValueError as exc:
                raise UsageError(f"config key {key}: {exc}") from exc
        if val is None:
            if default is None:
                raise UsageError(f"missing required option --{key.replace('_', '-')}")
            val = default
        settings[key] = val
    return settings


def _print_settings(command: str, settings: dict, extra: dict | None = None) -> None:
    items = dict(settings)
    if extra:
        items.update(extra)
    print(f"[{command}] effective settings:")
    for k in sorted(items):
        print(f"  {k} = {items[k]}")
    sys.stdout.flush()


def cmd_train(args, s: dict) -> int:
    phase = args.phase
    cfg = trainer.TrainConfig(phase=phase, steps=s["steps"], batch=s["batch"], patch=s["patch"],
                              learn_rate=s["lr"], seed=s["seed"], ncbc_noise_weight=s["ncbc_noise_weight"],
                              checkpoint_every=s["checkpoint_every"], base_channels=s["base_channels"],
                              depth=s["depth"])
    _print_settings(f"train {phase}", s, {"threads": ad.configure_threads()})
    data = imgio.scan_dataset(s["data"])
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    resume = s["resume"] or None
    if phase == "decom":
        res = trainer.train_decomposition(data, cfg, out_dir=out, resume=resume)
        csv_path = out / "decom_loss.csv"
    else:
        if not s["decom"]:
            raise UsageError("train enhance needs --decom CHECKPOINT")
        decom = trainer.load_network(s["decom"], "decom")
        res = trainer.train_enhancement(data, decom, cfg, out_dir=out, resume=resume)
        csv_path = out / "enh_loss.csv"
    if s["figures"] and res.history:
        plotting.plot_loss_history(res.history, csv_path.with_suffix(".png"), title=f"{phase} phase")
    if res.history:
        first, last = res.history[0]["total"], res.history[-1]["total"]
        print(f"steps {res.history[0]['step']}..{res.history[-1]['step']}: total loss {first:.6g} -> {last:.6g}")
    print(f"wrote {csv_path}")
    return 0


def _load_nets(s: dict):
    decom = trainer.load_network(s["decom"], "decom")
    enh = trainer.load_network(s["enh"], "enh") if "enh" in s else None
    return decom, enh


def _outputs(inp: Path, out: Path, suffix: str = "") -> list[tuple[Path, Path]]:
    files = imgio.list_images(inp)
    if inp.is_dir():
        out.mkdir(parents=True, exist_ok=True)
        return [(f, out / f"{f.stem}{suffix}{f.suffix}") for f in files]
    if not inp.is_file():
        raise imgio.ImageFormatError(f"{inp}: no such file")
    if out.is_dir():
        return [(inp, out / f"{inp.stem}{suffix}{inp.suffix}")]
    out.parent.mkdir(parents=True, exist_ok=True)
    return [(inp, out)]


def enhance_image(decom, enh, img: np.ndarray) -> np.ndarray:
    """Decompose, brighten the illumination, recombine and clamp to [0, 1]."""
    x = torch.from_numpy(imgio.as_image_tensor(img))
    if x.shape[1] == 1:
        x = x.expand(-1, 3, -1, -1)
    with torch.no_grad():
        R, L = nets.decom_forward(decom, x)
        L_out = nets.enhance_forward(enh, R, L)
        out = nets.reconstruct(R, L_out).clamp(0.0, 1.0)
    return out.numpy()


def cmd_enhance(args, s: dict) -> int:
    _print_settings("enhance", s, {"threads": ad.configure_threads()})
    decom, enh = _load_nets(s)
    for src, dst in _outputs(Path(s["input"]), Path(s["output"])):
        imgio.save_image(enhance_image(decom, enh, imgio.load_image(src)), dst)
        print(f"{src} -> {dst}")
    return 0


def cmd_decompose(args, s: dict) -> int:
    _print_settings("decompose", s, {"threads": ad.configure_threads()})
    decom, _ = _load_nets(s)
    outdir = Path(s["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    for src in imgio.list_images(Path(s["input"])):
        img = imgio.load_image(src)
        x = torch.from_numpy(img if img.shape[1] == 3 else np.repeat(img, 3, axis=1))
        with torch.no_grad():
            R, L = nets.decom_forward(decom, x)
        r_path, l_path = outdir / f"{src.stem}_R{src.suffix}", outdir / f"{src.stem}_L.png"
        imgio.save_image(R.numpy(), r_path)
        imgio.save_image(L.numpy(), l_path)
        if s["figures"]:
            plotting.plot_decomposition(img, R.numpy(), L.numpy(), outdir / f"{src.stem}_decomposition.png", src.name)
        print(f"{src} -> {r_path}, {l_path}")
    return 0


def cmd_eval(args, s: dict) -> int:
    _print_settings("eval", s, {"threads": imgio.worker_count()})
    report = metrics.evaluate(s["dir_a"], s["dir_b"])
    path = Path(s["report"])
    path.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(path)
    print(report.to_text())
    if s["figures"]:
        plotting.plot_metric_report(report, path.with_suffix(".png"))
    agg = report.aggregate()
    print("aggregate: " + " ".join(f"{c}={getattr(agg, c):.4f}" for c in metrics.COLUMNS[1:]))
    return 0


def cmd_gradcheck(args, s: dict) -> int:
    _print_settings("gradcheck", s, {"threads": ad.configure_threads()})
    if s["precision"] not in (32, 64):
        raise UsageError("--precision must be 32 or 64")
    ok = gradcheck.main_report(s["precision"], s["seed"], corrupt=s["inject_fault"] or None)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="retinex-llie", description="Retinex low-light enhancement toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value settings file; flags override it")

    t = sub.add_parser("train", help="train the decomposition or enhancement phase")
    t.add_argument("phase", choices=["decom", "enhance"])
    t.add_argument("--data", help="dataset root with low/ and high/")
    t.add_argument("--out", help="output directory for checkpoints and loss CSV")
    t.add_argument("--steps", type=int)
    t.add_argument("--patch", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--ncbc-noise-weight", type=float)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--decom", help="decomposition checkpoint (enhance phase)")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--base-channels", type=int)
    t.add_argument("--depth", type=int)
    t.add_argument("--no-figures", dest="figures", action="store_const", const=False)
    common(t)

    e = sub.add_parser("enhance", help="enhance an image or a directory of images")
    e.add_argument("--decom")
    e.add_argument("--enh")
    e.add_argument("--input")
    e.add_argument("--output")
    common(e)

    d = sub.add_parser("decompose", help="write reflectance and illumination images")
    d.add_argument("--decom")
    d.add_argument("--input")
    d.add_argument("--outdir")
    d.add_argument("--no-figures", dest="figures", action="store_const", const=False)
    common(d)

    v = sub.add_parser("eval", help="score dir-a against same-named images in dir-b")
    v.add_argument("--dir-a")
    v.add_argument("--dir-b")
    v.add_argument("--report", help="CSV report path")
    v.add_argument("--no-figures", dest="figures", action="store_const", const=False)
    common(v)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    g.add_argument("--seed", type=int)
    g.add_argument("--precision", type=int)
    g.add_argument("--inject-fault", metavar="CASE", help=argparse.SUPPRESS)
    common(g)
    return p


HANDLERS = {"train": cmd_train, "enhance": cmd_enhance, "decompose": cmd_decompose,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on malformed flags
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args.command, args)
        return HANDLERS[args.command](args, settings)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (trainer.TrainingError, ckpt.CheckpointError, imgio.ImageFormatError, imgio.DatasetError,
            metrics.UnmatchedImagesError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
