"""Joint optimization of reconstruction, invariance and consistency losses,
plus checkpoint persistence."""
from __future__ import annotations

import csv
import json
import logging
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lgad import tensor as T
from lgad.ald import mask_stats, model_mask, partition_latent
from lgad.config import TrainingConfig
from lgad.data import (ImageDataset, PairBatch, PairSet, derive_seed, gen_glyph_dataset, load_idx,
                       make_pair_set, split_dataset)
from lgad.group import apply_operator, recombine
from lgad.nn import Adam, Dense, LatentOperator, Model, decode, encode, init_model
from lgad.tensor import ShapeError, Tape, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    recon: float = 1.0
    inv: float = 1.0
    const: float = 1.0

    def __post_init__(self):
        for name in ("recon", "inv", "const"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class LossTerms:
    total: Tensor
    recon: Tensor
    inv: Tensor
    const: Tensor
    mask: Tensor
    z: Tensor
    z_target_raw: Tensor  # E(T_g x) before the stop-gradient
    target_trace: list[Tensor]
    x_hat: Tensor

    def values(self) -> dict[str, float]:
        return {"L_total": self.total.item(), "L_recon": self.recon.item(),
                "L_inv": self.inv.item(), "L_const": self.const.item()}


def sq_norm(a: Tensor, b: Tensor) -> Tensor:
    """Squared L2 distance per sample, averaged over the batch."""
    d = T.sub(a, b)
    return T.scale(T.sum(T.mul(d, d)), 1.0 / a.shape[0])


def compute_losses(model: Model, batch: PairBatch, weights: LossWeights = LossWeights(),
                   op: LatentOperator | None = None, target: Tensor | None = None) -> LossTerms:
    """One pass of the per-batch objective.

    ``target`` overrides E(T_g x); finite-difference checks pass a frozen
    encoding so the numeric and tape gradients see the same stop-gradient.
    """
    op = op if op is not None else model.operator
    z = encode(model, batch.x)
    trace: list[Tensor] = []
    raw = target if target is not None else encode(model, batch.x_t, trace=trace)
    z_t = T.stop_gradient(raw)
    M = model_mask(model)
    src = partition_latent(z, M)
    tgt = partition_latent(z_t, M)
    z_v_g = apply_operator(op, src.z_v, batch.g, M)
    x_hat = decode(model, recombine(z_v_g, src.z_i))
    recon = sq_norm(x_hat, batch.x_t)
    inv = sq_norm(src.z_i, tgt.z_i)
    const = sq_norm(z_v_g, tgt.z_v)
    total = T.add(T.add(T.scale(recon, weights.recon), T.scale(inv, weights.inv)),
                  T.scale(const, weights.const))
    for name, term in (("L_recon", recon), ("L_inv", inv), ("L_const", const), ("L_total", total)):
        if not np.isfinite(term.data):
            raise FloatingPointError(f"non-finite loss: {name} = {term.item()}")
    return LossTerms(total, recon, inv, const, M, z, raw, trace, x_hat)


@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)

    COLUMNS = ("epoch", "L_total", "L_recon", "L_inv", "L_const", "variant_fraction")

    def to_csv(self, path) -> None:
        """Per-epoch rows; wall time is left out so reruns compare bitwise."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for rec in self.records:
                w.writerow([rec["epoch"]] + [repr(float(rec[c])) for c in self.COLUMNS[1:]])

    def to_json(self, path, include_timing: bool = False) -> None:
        keep = self.COLUMNS + (("wall_time",) if include_timing else ())
        rows = [{k: r[k] for k in keep} for r in self.records]
        Path(path).write_text(json.dumps({"epochs": rows}, indent=2))


def config_weights(cfg: TrainingConfig) -> LossWeights:
    return LossWeights(cfg.lambda_r, cfg.lambda_i, cfg.lambda_v)


def model_for(cfg: TrainingConfig, image_shape) -> Model:
    return init_model(cfg.latent_dim, image_shape, tuple(cfg.hidden_widths),
                      seed=derive_seed(cfg.seed, "init"), pair_aligned=cfg.pair_aligned,
                      operator=cfg.operator, tau=cfg.tau, alpha_init=cfg.alpha_init)


def dataset_for(cfg: TrainingConfig) -> tuple[ImageDataset, ImageDataset]:
    """(train, test) split of the configured dataset."""
    if cfg.dataset == "mnist-idx":
        ds = load_idx(cfg.mnist_images, cfg.mnist_labels)
        if len(ds) > cfg.n_images:
            ds = ds.subset(np.arange(cfg.n_images))
    else:
        ds = gen_glyph_dataset(cfg.n_images, seed=derive_seed(cfg.seed, "glyphs"))
    return split_dataset(ds, cfg.test_fraction, derive_seed(cfg.seed, "split"))


def eval_pairs(cfg: TrainingConfig, ds: ImageDataset) -> PairSet:
    return make_pair_set(ds, cfg.n_test_pairs, cfg.blocked, derive_seed(cfg.seed, "test-pairs"),
                         cfg.block_prob)


def train_pairs(cfg: TrainingConfig, ds: ImageDataset) -> PairSet:
    return make_pair_set(ds, cfg.n_pairs, cfg.blocked, derive_seed(cfg.seed, "train-pairs"),
                         cfg.block_prob)


def train(cfg: TrainingConfig, ds: ImageDataset, pairs: PairSet | None = None,
          model: Model | None = None, optimizer: Adam | None = None):
    """Run the epoch loop; returns (model, report, optimizer)."""
    pairs = pairs if pairs is not None else train_pairs(cfg, ds)
    model = model if model is not None else model_for(cfg, ds.image_shape)
    optimizer = optimizer if optimizer is not None else Adam(lr=cfg.lr)
    weights = config_weights(cfg)
    shuffle = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    params = model.parameters()
    report = TrainReport()
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(4)
        n = 0
        for batch in pairs.batches(cfg.batch, shuffle):
            with Tape() as tape:
                terms = compute_losses(model, batch, weights)
                grads = tape.backward(terms.total, list(params.values()))
            optimizer.step(params, {k: grads[p] for k, p in params.items()})
            v = terms.values()
            sums += len(batch) * np.array([v["L_total"], v["L_recon"], v["L_inv"], v["L_const"]])
            n += len(batch)
        means = sums / n
        frac = mask_stats(model_mask(model))["variant_fraction"]
        rec = {"epoch": epoch, "L_total": means[0], "L_recon": means[1], "L_inv": means[2],
               "L_const": means[3], "variant_fraction": frac,
               "wall_time": time.perf_counter() - t0}
        report.records.append(rec)
        log.info("epoch %d  total %.5f  recon %.5f  inv %.5f  const %.5f  variant %.3f",
                 epoch, *means, frac)
    return model, report, optimizer


# -------------------------------------------------------------- checkpoints

MAGIC = b"LGAD"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _named_tensors(model: Model, opt: Adam | None) -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in model.parameters().items()}
    f32 = np.float32
    out["meta.image_shape"] = np.array(model.image_shape, dtype=f32)
    out["meta.tau"] = np.array([model.tau], dtype=f32)
    out["meta.pair_aligned"] = np.array([float(model.pair_aligned)], dtype=f32)
    out["meta.operator"] = np.array([0.0 if model.operator.kind == "geometric" else 1.0], dtype=f32)
    if opt is not None:
        out["adam.state"] = np.array([opt.t, opt.lr, opt.beta1, opt.beta2, opt.eps], dtype=f32)
        for name in model.parameters():
            if name in opt.m:
                out[f"adam.m.{name}"] = opt.m[name]
                out[f"adam.v.{name}"] = opt.v[name]
    return out


def save_checkpoint(model: Model, opt: Adam | None, path) -> None:
    """Write ``LGAD``, version, named float32 tensors, then CRC32 of all prior bytes."""
    tensors = _named_tensors(model, opt)
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def read_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an LGAD checkpoint")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            if pos + n > len(body):
                raise struct.error("name overruns file")
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            dims = struct.unpack_from(f"<{rank}I", body, pos + 4)
            pos += 4 + 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(body):
                raise struct.error("tensor data overruns file")
            out[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4,
                                      offset=pos).reshape(dims).astype(np.float32)
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if pos != len(body):
        raise CheckpointError(f"{path}: corrupt checkpoint length ({len(body) - pos} stray bytes)")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    return out


def _layers(t: dict[str, np.ndarray], prefix: str) -> list[Dense]:
    layers = []
    i = 0
    while f"{prefix}.{i}.W" in t:
        layers.append(Dense(Tensor(t[f"{prefix}.{i}.W"], requires_grad=True),
                            Tensor(t[f"{prefix}.{i}.b"], requires_grad=True)))
        i += 1
    return layers


def load_checkpoint(path, expect_latent_dim: int | None = None) -> tuple[Model, Adam]:
    t = read_tensors(path)
    encoder, decoder = _layers(t, "enc"), _layers(t, "dec")
    if not encoder or not decoder or "alpha" not in t:
        raise CheckpointError(f"{path}: missing model tensors")
    d = encoder[-1].W.shape[1]
    if expect_latent_dim is not None and d != expect_latent_dim:
        raise ShapeError(f"checkpoint latent dim {d} does not match configured {expect_latent_dim}")
    h, w = (int(v) for v in t["meta.image_shape"])
    kind = "learned" if t["meta.operator"][0] == 1.0 else "geometric"
    model = Model(encoder, decoder, Tensor(t["alpha"], requires_grad=True),
                  LatentOperator(kind, _layers(t, "op")), d, (h, w),
                  bool(t["meta.pair_aligned"][0]), float(t["meta.tau"][0]))
    if decoder[0].W.shape[0] != d or encoder[0].W.shape[0] != h * w:
        raise ShapeError(f"{path}: inconsistent encoder/decoder shapes")
    opt = Adam()
    if "adam.state" in t:
        s = t["adam.state"]
        opt = Adam(lr=float(s[1]), beta1=float(s[2]), beta2=float(s[3]), eps=float(s[4]),
                   t=int(s[0]))
        for name in model.parameters():
            if f"adam.m.{name}" in t:
                opt.m[name] = t[f"adam.m.{name}"]
                opt.v[name] = t[f"adam.v.{name}"]
    return model, opt
