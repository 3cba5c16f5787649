"""Command-line entry point: ``cmsc <subcommand> [--config F] [--seed N] [--out P] [--checkpoint P]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from cmsc.config import Config, load_config, parse_config
from cmsc.errors import ContractError
from cmsc.harness import emit_csv, run_lambda_sweep, run_sensor_matrix, run_snr_sweep
from cmsc.trainer import Trainer, config_digest, load_model, save_model

SUBCOMMANDS = ("train", "sensor-matrix", "snr-sweep", "lambda-sweep", "phy-selftest")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmsc", description="Cross-modal semantic communication experiments.")
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", type=Path,
                   help="key = value config file; for sweeps it overlays the config stored in the checkpoint")
    p.add_argument("--seed", type=int, help="overrides the experiment seed (and the training seed for train)")
    p.add_argument("--out", type=Path, help="CSV output (sweeps) or loss log (train)")
    p.add_argument("--checkpoint", type=Path, help="trained model to write (train) or read (sweeps)")
    p.add_argument("--channel", choices=("awgn", "rayleigh"),
                   help="channel override; lambda-sweep defaults to rayleigh")
    p.add_argument("--ego-modality", choices=("lidar", "camera", "random"),
                   help="ego modality override; lambda-sweep defaults to random")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _with_overrides(cfg: Config, args, *, channel: str | None = None, ego: str | None = None) -> Config:
    exp = cfg.experiment
    if args.seed is not None:
        exp = replace(exp, seed=args.seed)
    channel = args.channel or channel
    ego = args.ego_modality or ego
    if channel is not None:
        exp = replace(exp, channel=channel)
    if ego is not None:
        exp = replace(exp, ego_modality=ego)
    return replace(cfg, experiment=exp)


def _train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    if args.checkpoint is None:
        msg = "train needs --checkpoint <path> for the trained model"
        raise ContractError(msg)
    log_path = args.out or args.checkpoint.with_suffix(".loss.csv")
    trainer = Trainer(cfg, log_path=log_path, checkpoint_dir=args.checkpoint.parent / "stages")
    trainer.run()
    save_model(args.checkpoint, trainer)
    print(f"wrote {args.checkpoint} and {log_path}")
    for stage, secs in trainer.timings.items():
        print(f"{stage}: {secs:.1f} s")
    return 0


def _sweep(args) -> int:
    if args.checkpoint is None:
        msg = f"{args.command} needs --checkpoint <path> from a train run"
        raise ContractError(msg)
    model, cfg, meta = load_model(args.checkpoint)
    if args.config is not None:
        # experiment keys overlay the config the model was trained with
        cfg = parse_config(args.config.read_text(), base=cfg)
        if config_digest(cfg) != meta.get("digest"):
            msg = f"{args.config} changes model or training settings baked into {args.checkpoint}"
            raise ContractError(msg)
    if args.command == "sensor-matrix":
        rows = run_sensor_matrix(model, _with_overrides(cfg, args))
    elif args.command == "snr-sweep":
        rows = run_snr_sweep(model, _with_overrides(cfg, args))
    else:
        rows = run_lambda_sweep(model, _with_overrides(cfg, args, channel="rayleigh", ego="random"))
    out = args.out or Path(f"{args.command}.csv")
    emit_csv(rows, out)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def phy_selftest(seed: int = 0) -> list[tuple[str, bool]]:
    """Quick exactness checks of the classical chain; returns (name, passed) pairs."""
    from cmsc.phy import (constellation, dequantize, ldpc_decode_batch, ldpc_encode_batch, qam_hard_demod,
                          qam_modulate, quantize, syndrome)

    rng = np.random.default_rng(seed)
    out = []
    info = rng.integers(0, 2, size=(32, 324), dtype=np.uint8)
    cw = ldpc_encode_batch(info)
    out.append(("ldpc parity checks", all(not syndrome(c).any() for c in cw)))
    dec, ok, _ = ldpc_decode_batch(np.where(cw == 0, 10.0, -10.0))
    out.append(("ldpc noiseless round trip", bool(ok.all() and np.array_equal(dec, info))))
    for order in (16, 256):
        pts, _ = constellation(order)
        bits = rng.integers(0, 2, size=int(np.log2(order)) * 500, dtype=np.uint8)
        out.append((f"{order}-qam unit energy", abs(np.mean(np.abs(pts) ** 2) - 1.0) < 1e-12))
        out.append((f"{order}-qam round trip",
                    bool(np.array_equal(qam_hard_demod(qam_modulate(bits, order), order), bits))))
    x = rng.standard_normal((62, 16))
    stream = quantize(x)
    out.append(("quantizer half-step bound", bool(np.abs(dequantize(stream) - x).max() <= stream.step / 2 + 1e-12)))
    return out


def _phy(args) -> int:
    results = phy_selftest(args.seed or 0)
    for name, ok in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return 0 if all(ok for _, ok in results) else 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return _train(args)
        if args.command == "phy-selftest":
            return _phy(args)
        return _sweep(args)
    except (ContractError, OSError) as exc:
        print(f"cmsc {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
