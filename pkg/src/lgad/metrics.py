"""Reconstruction quality, linear probes on latent parts, the threshold sweep,
latent swapping and per-dimension magnitude export."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import rankdata

from lgad.ald import model_mask, partition_latent
from lgad.data import PairSet, image_grid, rotate_images, write_pgm
from lgad.group import recombine, transform_latent
from lgad.nn import Adam, Model, decode, encode
from lgad.tensor import ShapeError, Tensor

PSNR_CAP = 99.0
SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def rmse(a, b) -> float:
    return float(np.sqrt(mse(a, b)))


def psnr_from_mse(m) -> np.ndarray | float:
    m = np.asarray(m, dtype=np.float64)
    out = np.where(m < 1e-10, PSNR_CAP, 10.0 * np.log10(1.0 / np.maximum(m, 1e-300)))
    return float(out) if out.ndim == 0 else out


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    return psnr_from_mse(mse(a, b))


def _ssim_map(a: np.ndarray, b: np.ndarray, win: int) -> np.ndarray:
    # a, b: [..., H, W]; statistics over every valid win x win window
    wa = sliding_window_view(a, (win, win), axis=(-2, -1))
    wb = sliding_window_view(b, (win, win), axis=(-2, -1))
    ax = (-2, -1)
    n = win * win
    mu_a, mu_b = wa.mean(axis=ax), wb.mean(axis=ax)
    # sample (n - 1) normalization
    va = (wa * wa).mean(axis=ax) - mu_a ** 2
    vb = (wb * wb).mean(axis=ax) - mu_b ** 2
    cov = (wa * wb).mean(axis=ax) - mu_a * mu_b
    va, vb, cov = (v * n / (n - 1) for v in (va, vb, cov))
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (va + vb + SSIM_C2)
    return num / den


def ssim(a, b, win: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all valid uniform windows, data range 1."""
    a, b = _pair(a, b)
    if a.ndim != 2 or min(a.shape) < win:
        raise ShapeError(f"ssim needs a 2-D image of at least {win}x{win}, got {a.shape}")
    if np.array_equal(a, b):
        return 1.0
    return float(_ssim_map(a, b, win).mean())


def ssim_batch(a: np.ndarray, b: np.ndarray, win: int = SSIM_WINDOW) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim != 3 or min(a.shape[1:]) < win:
        raise ShapeError(f"ssim_batch needs [N, H, W] with H, W >= {win}, got {a.shape}")
    out = _ssim_map(a, b, win).mean(axis=(1, 2))
    same = np.all(a == b, axis=(1, 2))
    out[same] = 1.0
    return out


# ----------------------------------------------------------- reconstruction


@dataclass
class MetricsReport:
    psnr_mean: float
    ssim_mean: float
    rmse_mean: float
    n: int
    psnr: np.ndarray = field(repr=False)
    ssim: np.ndarray = field(repr=False)
    rmse: np.ndarray = field(repr=False)

    @classmethod
    def from_images(cls, pred: np.ndarray, target: np.ndarray) -> MetricsReport:
        pred, target = _pair(pred, target)
        per_mse = ((pred - target) ** 2).mean(axis=(1, 2))
        p = np.atleast_1d(psnr_from_mse(per_mse))
        s = ssim_batch(pred, target)
        r = np.sqrt(per_mse)
        return cls(float(p.mean()), float(s.mean()), float(r.mean()), len(p), p, s, r)

    def to_dict(self, per_sample: bool = False) -> dict:
        d = {"psnr": self.psnr_mean, "ssim": self.ssim_mean, "rmse": self.rmse_mean, "n": self.n}
        if per_sample:
            d.update(psnr_per_sample=self.psnr.tolist(), ssim_per_sample=self.ssim.tolist(),
                     rmse_per_sample=self.rmse.tolist())
        return d


def predict_transformed(model: Model, pairs: PairSet, batch_size: int = 256) -> np.ndarray:
    """D(Phi_g(E(x))) for every pair, as [N, H, W]."""
    out = []
    M = model_mask(model)
    for b in pairs.batches(batch_size):
        z = encode(model, b.x)
        out.append(decode(model, transform_latent(model, z, b.g, M)).data)
    return np.concatenate(out).reshape(pairs.x_t.shape)


def evaluate_reconstruction(model: Model, pairs: PairSet, batch_size: int = 256) -> MetricsReport:
    return MetricsReport.from_images(predict_transformed(model, pairs, batch_size), pairs.x_t)


def constant_baseline(pairs: PairSet, value: float = 0.5) -> MetricsReport:
    """Scores of a decoder that outputs ``value`` everywhere."""
    return MetricsReport.from_images(np.full(pairs.x_t.shape, value), pairs.x_t)


# -------------------------------------------------------------------- probe


def encode_images(model: Model, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    flat = np.asarray(images, dtype=model.alpha.dtype).reshape(len(images), -1)
    return np.concatenate([encode(model, Tensor(flat[i:i + batch_size])).data
                           for i in range(0, len(flat), batch_size)])


def latent_parts(model: Model, images: np.ndarray, tau: float | None = None) -> dict[str, np.ndarray]:
    """Full-width z, z_v and z_i for a stack of images."""
    z = encode_images(model, images)
    M = model_mask(model, tau)
    part = partition_latent(Tensor(z), M)
    return {"z": z, "z_v": part.z_v.data, "z_i": part.z_i.data}


@dataclass
class ProbeReport:
    representation: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    confusion: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        return d


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def auc_ovr(scores: np.ndarray, labels: np.ndarray, classes: int) -> float:
    """Macro one-vs-rest ROC AUC from the Mann-Whitney rank statistic.

    Classes absent from ``labels`` (or present with no negatives) are skipped.
    """
    aucs = []
    for k in range(classes):
        pos = labels == k
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = rankdata(scores[:, k])
        aucs.append((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
    return float(np.mean(aucs)) if aucs else float("nan")


def classification_scores(y_true, y_pred, scores, classes: int, representation: str) -> ProbeReport:
    conf = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    tp = np.diag(conf).astype(np.float64)
    pred_n, true_n = conf.sum(axis=0), conf.sum(axis=1)
    present = true_n > 0
    prec = np.divide(tp, pred_n, out=np.zeros(classes), where=pred_n > 0)
    rec = np.divide(tp, true_n, out=np.zeros(classes), where=true_n > 0)
    f1 = np.divide(2 * prec * rec, prec + rec, out=np.zeros(classes), where=(prec + rec) > 0)
    return ProbeReport(representation, float(tp.sum() / len(y_true)), float(prec[present].mean()),
                       float(rec[present].mean()), float(f1[present].mean()),
                       auc_ovr(scores, y_true, classes), conf)


def train_probe(latents: np.ndarray, labels: np.ndarray, seed: int = 0, representation: str = "z",
                classes: int | None = None, epochs: int = 200, lr: float = 1e-2,
                test_fraction: float = 0.2) -> ProbeReport:
    """Multinomial logistic regression fit with full-batch Adam; scored on a held-out split."""
    x = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise ShapeError(f"probe: latents {x.shape} vs labels {y.shape}")
    if len(np.unique(y)) < 2:
        raise ValueError("probe needs at least two classes")
    classes = int(y.max()) + 1 if classes is None else classes
    order = np.random.default_rng(seed).permutation(len(y))
    n_test = max(1, int(round(len(y) * test_fraction)))
    te, tr = order[:n_test], order[n_test:]
    W = Tensor(np.zeros((x.shape[1], classes)))
    b = Tensor(np.zeros(classes))
    params = {"W": W, "b": b}
    opt = Adam(lr=lr)
    onehot = np.eye(classes)[y[tr]]
    xt = x[tr]
    for _ in range(epochs):
        p = _softmax(xt @ W.data + b.data)
        g = (p - onehot) / len(tr)
        opt.step(params, {"W": xt.T @ g, "b": g.sum(axis=0)})
    scores = _softmax(x[te] @ W.data + b.data)
    return classification_scores(y[te], scores.argmax(axis=1), scores, classes, representation)


def probe_parts(model: Model, images: np.ndarray, labels: np.ndarray, seed: int = 0,
                tau: float | None = None) -> dict[str, ProbeReport]:
    parts = latent_parts(model, images, tau)
    classes = int(np.max(labels)) + 1
    return {k: train_probe(v, labels, seed, k, classes) for k, v in parts.items()}


def invariance_ratio(model: Model, pairs: PairSet) -> float:
    """mean ||z_i(x) - z_i(T_g x)||^2 over mean ||z(x) - z(T_g x)||^2."""
    z = encode_images(model, pairs.x)
    zt = encode_images(model, pairs.x_t)
    keep = 1.0 - model_mask(model).data
    num = (((z - zt) * keep) ** 2).sum(axis=1).mean()
    den = ((z - zt) ** 2).sum(axis=1).mean()
    return float(num / den) if den > 0 else 0.0


# --------------------------------------------------------------- tau sweep

DEFAULT_TAUS = tuple(round(0.1 * k, 1) for k in range(1, 10))


def sweep_tau(model: Model, images: np.ndarray, labels: np.ndarray, taus=DEFAULT_TAUS,
              seed: int = 0) -> list[dict]:
    """Probe accuracy on z_v with the mask recomputed at each threshold.

    Every row carries the accuracy of the full-z probe for comparison.
    """
    z = encode_images(model, images)
    classes = int(np.max(labels)) + 1
    base = train_probe(z, labels, seed, "z", classes)
    rows = []
    for tau in taus:
        M = model_mask(model, tau)
        z_v = partition_latent(Tensor(z), M).z_v.data
        rep = train_probe(z_v, labels, seed, "z_v", classes)
        rows.append({"tau": float(tau), "accuracy": rep.accuracy, "f1": rep.f1,
                     "variant_fraction": float(M.data.mean()), "z_accuracy": base.accuracy})
    return rows


def write_rows(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


# ------------------------------------------------------- swaps and magnitudes


def swap_latents(model: Model, x1: np.ndarray, x2: np.ndarray) -> list[np.ndarray]:
    """Decode [z_v1; z_i1], [z_v2; z_i2], [z_v1; z_i2] and [z_v2; z_i1]."""
    z = encode_images(model, np.stack([x1, x2]))
    M = model_mask(model)
    p = partition_latent(Tensor(z), M)
    zv, zi = p.z_v.data, p.z_i.data
    combos = [(0, 0), (1, 1), (0, 1), (1, 0)]
    lat = recombine(Tensor(np.stack([zv[a] for a, _ in combos])),
                    Tensor(np.stack([zi[b] for _, b in combos])))
    out = decode(model, lat).data.reshape(4, *model.image_shape)
    return [out[k] for k in range(4)]


def write_swap_grid(model: Model, x1: np.ndarray, x2: np.ndarray, path) -> np.ndarray:
    """Inputs on the top row, the four decodes below."""
    dec = swap_latents(model, x1, x2)
    blank = np.zeros_like(x1)
    grid = image_grid([x1, x2, blank, blank, *dec], cols=4)
    write_pgm(path, grid)
    return grid


def latent_magnitudes(model: Model, images: np.ndarray, n_rotations: int = 16,
                      n_probe_images: int = 8, seed: int = 0) -> list[dict]:
    """Per-dimension mean |z_v|, mean |z_i| and variance of z under rotation.

    The rotation variance is taken per image over ``n_rotations`` random
    angles and averaged over the first ``n_probe_images`` images.
    """
    parts = latent_parts(model, images)
    M = model_mask(model).data
    rng = np.random.default_rng(seed)
    var = np.zeros(model.latent_dim)
    fixed = images[:n_probe_images]
    for img in fixed:
        angles = rng.uniform(0.0, 2.0 * np.pi, size=n_rotations)
        rotated = rotate_images(np.repeat(img[None], n_rotations, axis=0), angles)
        var += encode_images(model, rotated).var(axis=0)
    var /= len(fixed)
    zv, zi = np.abs(parts["z_v"]).mean(axis=0), np.abs(parts["z_i"]).mean(axis=0)
    return [{"dim": k, "mask": int(M[k]), "mean_abs_z_v": float(zv[k]),
             "mean_abs_z_i": float(zi[k]), "rotation_variance": float(var[k])}
            for k in range(model.latent_dim)]


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
