"""Command-line entry point: ``lgad <command> [--config FILE] [--key value ...]``."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from lgad import metrics as ME
from lgad.config import ConfigError, TrainingConfig, parse_config, write_resolved
from lgad.data import IDXFormatError, export_dataset, image_grid, write_idx, write_pgm
from lgad.tensor import ShapeError
from lgad.training import (CheckpointError, dataset_for, eval_pairs, load_checkpoint,
                           save_checkpoint, train)

log = logging.getLogger("lgad")

COMMANDS = ("gen-data", "train", "eval", "probe", "sweep-tau", "swap", "export-latents", "ablate")
CHECKPOINT_NAME = "model.ckpt"

# (label, lambda_i, lambda_v); reconstruction is always on
ABLATIONS = (("L_inv only", True, False), ("L_const only", False, True), ("both", True, True))


def blob_hash(data: bytes) -> str:
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


class Run:
    """Output directory bookkeeping: every written file is hashed into the manifest."""

    def __init__(self, command: str, cfg: TrainingConfig):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[Path] = []
        self.timing: dict[str, float] = {}
        self.t0 = time.perf_counter()

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(p)
        return p

    def write_json(self, name: str, obj) -> Path:
        p = self.path(name)
        ME.write_json(obj, p)
        return p

    def finish(self) -> Path:
        self.outputs.append(write_resolved(self.cfg, self.out))
        self.timing["total_seconds"] = time.perf_counter() - self.t0
        (self.out / "timing.json").write_text(json.dumps(self.timing, indent=2))
        files = {}
        for p in sorted(set(self.outputs)):
            if p.is_dir():
                for q in sorted(p.rglob("*")):
                    if q.is_file():
                        files[str(q.relative_to(self.out))] = blob_hash(q.read_bytes())
            else:
                files[str(p.relative_to(self.out))] = blob_hash(p.read_bytes())
        manifest = {"command": self.command, "config_hash": self.cfg.hash(),
                    "seed": self.cfg.seed, "outputs": files}
        path = self.out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path


def _load_model(cfg: TrainingConfig, checkpoint: str | None):
    if not checkpoint:
        raise CheckpointError("this command needs --checkpoint PATH")
    if not Path(checkpoint).is_file():
        raise CheckpointError(f"checkpoint not found: {checkpoint}")
    model, _ = load_checkpoint(checkpoint, expect_latent_dim=cfg.latent_dim)
    model.tau = cfg.tau
    return model


def cmd_gen_data(run: Run, args) -> None:
    tr, te = dataset_for(run.cfg)
    for name, ds in (("train", tr), ("test", te)):
        write_idx(ds.images, ds.labels, run.path(f"data/{name}-images-idx3-ubyte"),
                  run.path(f"data/{name}-labels-idx1-ubyte"))
        if args.pgm:
            export_dataset(ds, run.path(f"data/{name}-pgm"))
    write_pgm(run.path("data/preview.pgm"), image_grid(list(tr.images[:40]), cols=10))
    log.info("wrote %d train and %d test images to %s", len(tr), len(te), run.out / "data")


def _train_and_eval(cfg: TrainingConfig):
    tr, te = dataset_for(cfg)
    model, report, opt = train(cfg, tr)
    rec = ME.evaluate_reconstruction(model, eval_pairs(cfg, te))
    return model, report, opt, rec


def cmd_train(run: Run, args) -> None:
    t = time.perf_counter()
    tr, _ = dataset_for(run.cfg)
    model, report, opt = train(run.cfg, tr)
    run.timing["train_seconds"] = time.perf_counter() - t
    run.timing["epoch_wall_times"] = [r["wall_time"] for r in report.records]
    save_checkpoint(model, opt, run.path(CHECKPOINT_NAME))
    report.to_csv(run.path("report.csv"))
    report.to_json(run.path("report.json"))


def cmd_eval(run: Run, args) -> None:
    model = _load_model(run.cfg, args.checkpoint)
    _, te = dataset_for(run.cfg)
    pairs = eval_pairs(run.cfg, te)
    rec = ME.evaluate_reconstruction(model, pairs)
    base = ME.constant_baseline(pairs)
    run.write_json("metrics.json", {"model": rec.to_dict(), "baseline_0.5": base.to_dict(),
                                    "invariance_ratio": ME.invariance_ratio(model, pairs)})
    log.info("psnr %.2f dB  ssim %.4f  rmse %.4f (baseline psnr %.2f dB)",
             rec.psnr_mean, rec.ssim_mean, rec.rmse_mean, base.psnr_mean)


def cmd_probe(run: Run, args) -> None:
    model = _load_model(run.cfg, args.checkpoint)
    _, te = dataset_for(run.cfg)
    reports = ME.probe_parts(model, te.images, te.labels, seed=run.cfg.seed)
    run.write_json("probe.json", {k: r.to_dict() for k, r in reports.items()})
    for k, r in reports.items():
        log.info("%-3s acc %.3f  f1 %.3f  auc %.3f", k, r.accuracy, r.f1, r.auc)


def cmd_sweep_tau(run: Run, args) -> None:
    model = _load_model(run.cfg, args.checkpoint)
    _, te = dataset_for(run.cfg)
    taus = [float(t) for t in args.taus.split(",")] if args.taus else ME.DEFAULT_TAUS
    rows = ME.sweep_tau(model, te.images, te.labels, taus, seed=run.cfg.seed)
    ME.write_rows(rows, run.path("sweep_tau.csv"))


def cmd_swap(run: Run, args) -> None:
    model = _load_model(run.cfg, args.checkpoint)
    _, te = dataset_for(run.cfg)
    rng = np.random.default_rng(run.cfg.seed)
    for k in range(args.n_swaps):
        i, j = rng.choice(len(te), size=2, replace=False)
        ME.write_swap_grid(model, te.images[i], te.images[j], run.path(f"swap_{k}.pgm"))


def cmd_export_latents(run: Run, args) -> None:
    model = _load_model(run.cfg, args.checkpoint)
    _, te = dataset_for(run.cfg)
    rows = ME.latent_magnitudes(model, te.images, seed=run.cfg.seed)
    ME.write_rows(rows, run.path("latent_magnitudes.csv"))


def cmd_ablate(run: Run, args) -> None:
    rows = []
    for label, inv, const in ABLATIONS:
        cfg = dataclasses.replace(run.cfg, lambda_i=run.cfg.lambda_i if inv else 0.0,
                                  lambda_v=run.cfg.lambda_v if const else 0.0)
        t = time.perf_counter()
        _, _, _, rec = _train_and_eval(cfg)
        run.timing[f"{label} seconds"] = time.perf_counter() - t
        rows.append({"config": label, "L_inv": int(inv), "L_const": int(const),
                     "psnr": rec.psnr_mean, "ssim": rec.ssim_mean, "rmse": rec.rmse_mean})
        log.info("%-12s psnr %.2f  ssim %.4f  rmse %.4f", label, rec.psnr_mean, rec.ssim_mean,
                 rec.rmse_mean)
    ME.write_rows(rows, run.path("ablation.csv"))


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe,
            "sweep-tau": cmd_sweep_tau, "swap": cmd_swap, "export-latents": cmd_export_latents,
            "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lgad", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--checkpoint", help="model checkpoint for eval, probe, sweep-tau, swap, export-latents")
    p.add_argument("--taus", help="comma-separated thresholds for sweep-tau")
    p.add_argument("--n-swaps", type=int, default=4)
    p.add_argument("--pgm", action="store_true", help="gen-data: also export one PGM per image")
    p.add_argument("-q", "--quiet", action="store_true")
    cfg_group = p.add_argument_group("configuration overrides")
    for f in dataclasses.fields(TrainingConfig):
        flag = "--" + f.name.replace("_", "-")
        names = [flag] if "_" not in f.name else [flag, "--" + f.name]
        extra = {"nargs": "?", "const": "true"} if f.type == "bool" else {}
        cfg_group.add_argument(*names, dest=f"cfg_{f.name}", default=None, metavar="V", **extra)
    return p


def run_command(command: str, cfg: TrainingConfig, args) -> int:
    run = Run(command, cfg)
    HANDLERS[command](run, args)
    run.finish()
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    try:
        cfg = parse_config(args.config, overrides)
        return run_command(args.command, cfg, args)
    except (ConfigError, CheckpointError, IDXFormatError, ShapeError, FloatingPointError,
            OSError, ValueError) as exc:
        print(f"lgad {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
