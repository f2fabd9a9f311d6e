"""Optimization, the modality-dropout loop, and missing-modality evaluation.

Training runs batch-size-1 Adam with a polynomial learning-rate decay and
per-step random modality masks. Evaluation sweeps all 15 modality subsets
over a held-out set, producing the canonical 16-row Dice matrix (15 masks
plus their average).
"""

import io
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import losses as L
from . import model as M
from . import tensor as T
from .errors import NaNLoss, NonFiniteValue, ShapeMismatch
from .model import MODALITIES, ModalityMask
from .tensor import Tensor


def poly_lr(epoch, initial_lr, max_epoch, p=0.9):
    """initial_lr * (1 - epoch/max_epoch)^p; reaches 0 at max_epoch."""
    if not 0 <= epoch <= max_epoch:
        raise ValueError(f"epoch {epoch} outside [0, {max_epoch}]")
    return initial_lr * (1.0 - epoch / max_epoch) ** p


@dataclass
class OptimState:
    """Adam moments plus the shared step counter."""

    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    scratch: dict = field(default_factory=dict)


def init_optim(store, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-5):
    zeros = lambda: {k: np.zeros_like(a) for k, a in store.arrays.items()}
    return OptimState(m=zeros(), v=zeros(), beta1=beta1, beta2=beta2,
                      eps=eps, weight_decay=weight_decay)


def adam_step(store, grads, state, lr):
    """Bias-corrected Adam with L2-coupled weight decay (added to the
    gradient before the moment updates). Non-finite updates are errors,
    never silently frozen parameters."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    with np.errstate(over="ignore", invalid="ignore"):
        for key, theta in store.arrays.items():
            g = grads.get(key)
            if g is not None and g.shape != theta.shape:
                raise ShapeMismatch(f"grad for {key}: {g.shape} != {theta.shape}")
            buf = state.scratch.get(key)
            if buf is None:
                buf = state.scratch[key] = np.empty((2,) + theta.shape, dtype=theta.dtype)
            s, s2 = buf[0], buf[1]
            if state.weight_decay:
                np.multiply(theta, theta.dtype.type(state.weight_decay), out=s)
                if g is not None:
                    s += g
            elif g is not None:
                np.copyto(s, g)
            else:
                s.fill(0)
            if not np.isfinite(s).all():
                raise NonFiniteValue(f"non-finite gradient for {key}")
            m = state.m[key]
            v = state.v[key]
            m *= b1
            np.multiply(s, theta.dtype.type(1.0 - b1), out=s2)
            m += s2
            v *= b2
            np.multiply(s, s, out=s2)
            s2 *= theta.dtype.type(1.0 - b2)
            v += s2
            if not np.isfinite(v).all():
                raise NonFiniteValue(f"second moment of {key} overflowed")
            np.divide(v, theta.dtype.type(c2), out=s2)
            np.sqrt(s2, out=s2)
            s2 += theta.dtype.type(state.eps)
            np.divide(m, s2, out=s2)
            s2 *= theta.dtype.type(lr / c1)
            theta -= s2
            if not np.isfinite(theta).all():
                raise NonFiniteValue(f"adam update made {key} non-finite")


def sample_modality_mask(rng, dist="uniform15"):
    """Random non-empty modality subset.

    'uniform15' draws uniformly over the 15 non-empty subsets; 'bernoulli:q'
    keeps each modality with probability q, rejecting the empty draw;
    'full' always returns the complete mask.
    """
    if dist == "uniform15":
        bits = int(rng.integers(1, 16))
        return ModalityMask(tuple(bool(bits & (1 << int(m))) for m in MODALITIES))
    if dist == "full":
        return ModalityMask.full()
    if dist.startswith("bernoulli:"):
        q = float(dist.split(":", 1)[1])
        while True:
            delta = tuple(bool(rng.random() < q) for _ in MODALITIES)
            if any(delta):
                return ModalityMask(delta)
    raise ValueError(f"unknown mask distribution {dist!r}")


def class_weights(samples):
    """Inverse-frequency cross-entropy weights, mean-normalized and clamped."""
    counts = np.zeros(4, dtype=np.float64)
    for s in samples:
        counts += np.bincount(s.labels.ravel(), minlength=4)[:4]
    freq = counts / counts.sum()
    with np.errstate(divide="ignore"):
        inv = np.where(freq > 0, 1.0 / np.maximum(freq, 1e-12), 10.0)
    inv /= inv.mean()
    return np.clip(inv, 0.1, 10.0)


LOG_HEADER = "epoch,step,l_um,l_mm,l_seg,l_layer,l_mfd,l_total,lr"


def format_log_row(epoch, step, lb, lr):
    vals = lb.as_floats()
    nums = ",".join(f"{vals[k]:.9g}" for k in
                    ("l_um", "l_mm", "l_seg", "l_layer", "l_mfd", "l_total"))
    return f"{epoch},{step},{nums},{lr:.9g}"


def train_loop(cfg, samples, store, optim=None, start_epoch=0, log_stream=None,
               checkpoint_fn=None):
    """Optimize store in place; returns (optim state, log rows).

    Deterministic for a fixed cfg.seed. Raises NaNLoss (with the step index)
    the moment any loss stops being finite.
    """
    if not samples:
        raise ValueError("empty training set")
    arch = cfg.arch()
    rng = np.random.default_rng(cfg.seed)
    weights = class_weights(samples)
    normalized = [
        D.VolumeSample(images=D.normalized_images(s), labels=s.labels,
                       sample_id=s.sample_id)
        for s in samples
    ]
    if optim is None:
        optim = init_optim(store, weight_decay=cfg.weight_decay)
    rows = []
    step = optim.t
    for epoch in range(start_epoch, cfg.epochs):
        lr = poly_lr(epoch, cfg.initial_lr, cfg.max_epoch, cfg.lr_power)
        order = rng.permutation(len(normalized))
        for idx in order:
            base = normalized[idx]
            if cfg.augment:
                crop = D.augment(base, cfg.crop, rng)
            else:
                crop = D.center_crop(base, cfg.crop)
            mask = sample_modality_mask(rng, cfg.mask_dist)
            x = {m: Tensor(crop.images[m], dtype=store.dtype) for m in MODALITIES}
            view = store.view(True)
            try:
                with T.GradTape():
                    out = M.model_forward(view, arch, x, mask, "train")
                    lb = L.branch_losses(out, crop.labels, weights,
                                         lambda_mfd=cfg.lambda_mfd,
                                         compute_mfd=not arch.no_mfd)
                    if not np.isfinite(lb.l_total.data):
                        raise NaNLoss(step)
                    T.backward(lb.l_total)
                adam_step(store, view.grads(), optim, lr)
            except NonFiniteValue as exc:
                raise NaNLoss(step, f"step {step}: {exc}") from exc
            row = format_log_row(epoch, step, lb, lr)
            rows.append(row)
            if log_stream is not None:
                log_stream.write(row + "\n")
            step += 1
        if log_stream is not None:
            log_stream.flush()
        if checkpoint_fn is not None and cfg.checkpoint_interval > 0 \
                and (epoch + 1) % cfg.checkpoint_interval == 0:
            checkpoint_fn(epoch, optim)
    return optim, rows


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class DiceMatrix:
    """15 mask rows of (ET, TC, WT) Dice averages plus their mean."""

    rows: list = field(default_factory=list)  # (ModalityMask, et, tc, wt)

    @property
    def average(self):
        arr = np.array([[et, tc, wt] for _, et, tc, wt in self.rows])
        return tuple(arr.mean(axis=0))

    def mean_wt(self):
        return float(np.mean([wt for _, _, _, wt in self.rows]))


def model_predictor(store, arch):
    """Per-voxel argmax of the inference-path logits."""

    def predict(images, mask):
        x = {m: Tensor(images[m], dtype=store.dtype) for m in mask.available}
        out = M.model_forward(store.view(False), arch, x, mask, "infer")
        return np.argmax(out.seg_logits.data, axis=0)

    return predict


def eval_matrix(store, cfg, eval_samples, predictor=None):
    """Dice per region for each of the 15 canonical masks, averaged over the
    (center-cropped, z-scored) evaluation set."""
    if not eval_samples:
        raise ValueError("empty evaluation set")
    if predictor is None:
        predictor = model_predictor(store, cfg.arch())
    prepared = []
    for s in eval_samples:
        normed = D.VolumeSample(images=D.normalized_images(s), labels=s.labels,
                                sample_id=s.sample_id)
        prepared.append(D.center_crop(normed, cfg.crop))

    matrix = DiceMatrix()
    for mask in M.canonical_masks():
        scores = np.zeros(3)
        for s in prepared:
            pred = predictor(s.images, mask)
            scores += [L.dice_score(pred, s.labels, r) for r in L.REGIONS]
        scores /= len(prepared)
        matrix.rows.append((mask, float(scores[0]), float(scores[1]), float(scores[2])))
    return matrix


MATRIX_HEADER = "mask_flair,mask_t1ce,mask_t1,mask_t2,dice_et,dice_tc,dice_wt"


def write_matrix_csv(path, matrix):
    """16 data rows in canonical order; the average row carries the (never
    valid) all-zero mask as its marker."""
    buf = io.StringIO()
    buf.write(MATRIX_HEADER + "\n")
    for mask, et, tc, wt in matrix.rows:
        bits = ",".join(str(int(mask[m])) for m in MODALITIES)
        buf.write(f"{bits},{et:.6f},{tc:.6f},{wt:.6f}\n")
    et, tc, wt = matrix.average
    buf.write(f"0,0,0,0,{et:.6f},{tc:.6f},{wt:.6f}\n")
    with open(path, "w") as f:
        f.write(buf.getvalue())


def read_matrix_csv(path):
    """Returns (list of 15 (delta tuple, et, tc, wt), average tuple)."""
    lines = [ln for ln in open(path).read().splitlines() if ln]
    assert lines[0] == MATRIX_HEADER, f"unexpected header {lines[0]!r}"
    rows = []
    avg = None
    for ln in lines[1:]:
        parts = ln.split(",")
        delta = tuple(bool(int(b)) for b in parts[:4])
        scores = tuple(float(x) for x in parts[4:])
        if not any(delta):
            avg = scores
        else:
            rows.append((delta, *scores))
    return rows, avg


# ---------------------------------------------------------------------------
# optimizer sidecar (resume support)
# ---------------------------------------------------------------------------


def save_optim(path, optim, epoch):
    payload = {"t": np.asarray(optim.t), "epoch": np.asarray(epoch),
               "weight_decay": np.asarray(optim.weight_decay)}
    for k, v in optim.m.items():
        payload["m." + k] = v
    for k, v in optim.v.items():
        payload["v." + k] = v
    np.savez(path, **payload)


def load_optim(path, store):
    with np.load(path) as z:
        t = int(z["t"])
        epoch = int(z["epoch"])
        wd = float(z["weight_decay"])
        m = {k[2:]: z[k].copy() for k in z.files if k.startswith("m.")}
        v = {k[2:]: z[k].copy() for k in z.files if k.startswith("v.")}
    if set(m) != set(store.arrays):
        raise ShapeMismatch("optimizer state keys do not match the parameter store")
    return OptimState(m=m, v=v, t=t, weight_decay=wd), epoch
