"""Command-line entry point.

Subcommands::

    viewforge synth     --spec <json> --out <dir>
    viewforge pretrain  --config <json> --out <dir>
    viewforge probe     --checkpoint <file> --data <dir> --out <dir>
    viewforge sweep     --config <json> --budgets 0.01,0.05 --out <dir>
    viewforge visualize --checkpoint <file> --data <dir> --n 4 --out <dir>

Seeds resolve as ``--seed`` flag, then the JSON file, then ``VIEWFORGE_SEED``,
then 0. Wall-clock information only ever goes to ``run_meta.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .autodiff import Tensor
from .data import SyntheticSpec, generate_synthetic, load_dataset, save_dataset, split_dataset
from .networks import generator_forward
from .training import (
    ConfigError,
    ExperimentConfig,
    budget_sweep,
    config_from_dict,
    derive_seed,
    linear_probe,
    prepare_data,
    pretrain,
    restore_networks,
    results_json,
    sweep_to_csv,
)
from .views import ChannelStats, PerturbationDelta, expert_view, make_view, project_l1

logger = logging.getLogger("viewforge")

SEED_ENV = "VIEWFORGE_SEED"
CHECKPOINT_NAME = "model.vfck"


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"{p}: no such file")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CLIError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc


def _env_seed() -> Optional[int]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise CLIError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def parse_config(path, seed: Optional[int] = None) -> ExperimentConfig:
    """Read an experiment config; unset fields take their defaults."""
    d = _read_json(path)
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        d["seed"] = seed
    elif "seed" not in d and _env_seed() is not None:
        d["seed"] = _env_seed()
    if isinstance(d.get("dataset"), str) and not os.path.isabs(d["dataset"]):
        # relative dataset paths are relative to the config file
        d["dataset"] = str((Path(path).parent / d["dataset"]).resolve())
    return config_from_dict(d)


# ---------------------------------------------------------------------------
# PGM export
# ---------------------------------------------------------------------------

def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def rescale_to_u8(channel: np.ndarray) -> np.ndarray:
    """Min to 0 and max to 255, linearly; a constant channel becomes 128."""
    c = np.asarray(channel, dtype=np.float64)
    lo, hi = c.min(), c.max()
    if hi == lo:
        return np.full(c.shape, 128, dtype=np.uint8)
    return _round_half_up((c - lo) / (hi - lo) * 255.0).astype(np.uint8)


def window_to_u8(channel: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Fixed window [lo, hi] to [0, 255]; values outside are clipped."""
    c = np.clip(np.asarray(channel, dtype=np.float64), lo, hi)
    return _round_half_up((c - lo) / (hi - lo) * 255.0).astype(np.uint8)


def encode_pgm(pixels: np.ndarray) -> bytes:
    img = np.asarray(pixels, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-d image, got shape {img.shape}")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def decode_pgm(buf: bytes) -> np.ndarray:
    parts = buf.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError("not an 8-bit binary PGM")
    w, h = (int(v) for v in parts[1].split())
    data = parts[3]
    if len(data) != w * h:
        raise ValueError(f"PGM payload has {len(data)} bytes, expected {w * h}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_meta(out: Path, command: str, started: float, extra: Optional[dict] = None) -> None:
    meta = {
        "command": command,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "elapsed_seconds": round(time.time() - started, 3),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "viewforge": __version__,
    }
    meta.update(extra or {})
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _dump(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_synth(args) -> None:
    started = time.time()
    raw = _read_json(args.spec)
    if not isinstance(raw, dict):
        raise CLIError("synthetic spec must be a JSON object")
    raw = dict(raw)
    split = raw.pop("split", {})
    if args.seed is not None:
        raw["seed"] = args.seed
    elif "seed" not in raw and _env_seed() is not None:
        raw["seed"] = _env_seed()
    spec = SyntheticSpec.from_dict(raw)
    fractions = list(split.get("fractions", (0.8, 0.1, 0.1)))
    split_seed = int(split.get("seed", spec.seed))

    ds = generate_synthetic(spec)
    train, _, _ = split_dataset(ds, fractions, split_seed)
    stats = ChannelStats.compute(train.images)
    out = _out_dir(args.out)
    save_dataset(out, ds, {
        "synthetic_spec": spec.to_dict(),
        "split": {"fractions": fractions, "seed": split_seed},
        "channel_stats": stats.to_dict(),
    })
    _write_run_meta(out, "synth", started)
    print(f"wrote {len(ds)} samples of shape {ds.chw} to {out}")


def cmd_pretrain(args) -> None:
    started = time.time()
    config = parse_config(args.config, args.seed)
    out = _out_dir(args.out)
    result = pretrain(config)
    result.save_checkpoint(out / CHECKPOINT_NAME)
    (out / "metrics.csv").write_text(result.metrics_csv())
    _dump(out / "config.json", config.to_dict())
    _write_run_meta(out, "pretrain", started)
    last = result.history[-1] if result.history else None
    tail = f", final encoder loss {last.encoder_loss:.4f}" if last else ""
    print(f"{config.method}: {config.epochs} epochs{tail}; checkpoint at {out / CHECKPOINT_NAME}")


def _data_for_checkpoint(config: ExperimentConfig, data_dir, stats: Optional[ChannelStats]):
    if data_dir is None:
        return prepare_data(config, stats=stats)
    ds, meta = load_dataset(data_dir)
    return prepare_data(config, ds, meta, stats=stats)


def cmd_probe(args) -> None:
    started = time.time()
    config, encoder, _, stats = restore_networks(args.checkpoint)
    data = _data_for_checkpoint(config, args.data, stats)
    if data.train.chw[0] != encoder.in_channels:
        raise CLIError(f"checkpoint expects {encoder.in_channels} channels, data has {data.train.chw[0]}")
    probe = linear_probe(encoder, data.train, data.test, config)
    out = _out_dir(args.out)
    (out / "results.json").write_text(results_json(config, probe))
    _write_run_meta(out, "probe", started, {"checkpoint": str(args.checkpoint)})
    print(f"{probe.metric} = {probe.test_score:.4f} (train {probe.train_score:.4f})")


def _parse_budgets(text: str) -> list[float]:
    try:
        budgets = [float(b) for b in text.split(",") if b.strip()]
    except ValueError:
        raise CLIError(f"--budgets must be a comma-separated list of numbers, got {text!r}") from None
    if not budgets:
        raise CLIError("--budgets is empty")
    return budgets


def cmd_sweep(args) -> None:
    started = time.time()
    config = parse_config(args.config, args.seed)
    budgets = _parse_budgets(args.budgets)
    rows = budget_sweep(config, budgets, workers=args.workers)
    out = _out_dir(args.out)
    (out / "sweep.csv").write_text(sweep_to_csv(rows))
    _dump(out / "config.json", config.to_dict())
    _write_run_meta(out, "sweep", started)
    failed = sum(r.status != "ok" for r in rows)
    print(f"{len(rows)} sweep rows written to {out / 'sweep.csv'} ({failed} failed)")


def render_views(config: ExperimentConfig, encoder_channels: int, generator, images: np.ndarray):
    """Input, view and delta for each image, matching how training builds views."""
    if images.shape[1] != encoder_channels:
        raise CLIError(f"checkpoint expects {encoder_channels} channels, samples have {images.shape[1]}")
    x = images.astype(config.dtype)
    if generator is not None:
        raw = generator_forward(generator, Tensor(x), derive_seed(config.seed, "visualize"))
        delta = project_l1(PerturbationDelta(raw, config.budget))
        views = make_view(Tensor(x), delta).data
        return x, views, delta.delta.data
    rng = np.random.default_rng(derive_seed(config.seed, "visualize"))
    if config.method == "none":
        views = np.clip(x, -1.0, 1.0)
    else:
        views = np.stack([expert_view(img, rng, config.method == "expert_full") for img in x])
    return x, views, views - x


def cmd_visualize(args) -> None:
    started = time.time()
    if args.n < 1:
        raise CLIError("--n must be at least 1")
    config, encoder, generator, stats = restore_networks(args.checkpoint)
    data = _data_for_checkpoint(config, args.data, stats)
    samples = data.test.images[:args.n]
    inputs, views, deltas = render_views(config, encoder.in_channels, generator, samples)
    out = _out_dir(args.out)
    written = 0
    for i in range(len(samples)):
        for c in range(inputs.shape[1]):
            stem = f"sample{i:03d}_ch{c:02d}"
            (out / f"{stem}_input.pgm").write_bytes(encode_pgm(window_to_u8(inputs[i, c])))
            (out / f"{stem}_view.pgm").write_bytes(encode_pgm(window_to_u8(views[i, c])))
            (out / f"{stem}_delta.pgm").write_bytes(encode_pgm(rescale_to_u8(deltas[i, c])))
            written += 3
    _write_run_meta(out, "visualize", started, {"checkpoint": str(args.checkpoint)})
    print(f"wrote {written} PGM images for {len(samples)} samples to {out}")


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viewforge", description="Learned views for multispectral contrastive pretraining.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", metavar="{synth,pretrain,probe,sweep,visualize}")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="pretrain an encoder (and view generator)")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (defaults to the one in the checkpoint config)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sweep", help="distortion-budget sweep for the generator methods")
    p.add_argument("--config", required=True)
    p.add_argument("--budgets", required=True, help="comma-separated list, e.g. 0.01,0.05,0.1")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("visualize", help="export input/view/delta PGM images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 and usage on bad input
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CLIError, ValueError, KeyError, OSError, RuntimeError, FloatingPointError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        if isinstance(exc, KeyError):
            msg = str(exc.args[0]) if exc.args else msg
        print(f"viewforge: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
