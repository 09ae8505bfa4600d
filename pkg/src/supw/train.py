"""Training: total objective, SGD with polynomial decay, warm-up, grid search.

The objective per batch is::

    total = task + isw_weight * sum(whitening[block]) + superpixel

where ``task`` is the BCE, ``superpixel = lambda1 * BCE + lambda2 * sg`` with
``sg`` the soft occupancy penalty, and each hooked encoder block adds one
whitening term that stays zero during warm-up.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .imaging import (GeometricConfig, PhotometricParams, geometric_augment,
                      resize_image, resize_mask)
from .metrics import confusion, metrics_from
from .numerics import NonFiniteError
from .segnet import (HOOKS, SegNetwork, build, config_hash, forward, save_checkpoint,
                     to_nchw, transform_batch)
from .slic import SlicParams
from .slic_loss import GridCache, SlicLossConfig, bce, l_slic
from .whitening import IswState, covariance, dwt_loss, isw_loss, isw_update, pair_variance

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-2
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 30
    batch_size: int = 2
    slic_weight: float = 0.75
    convex_weight: bool = True
    slic_k: int = 500
    slic_m: float = 50.0
    tau: float = 0.9
    isw_weight: float = 0.6
    isw_reduction: str = "masked"
    isw_recluster: bool = False
    pair_task_loss: bool = True
    dwt_weight: float = 0.0
    warmup_epochs: int = 5
    seed: int = 0
    use_slic_loss: bool = True
    use_isw: bool = True
    input_size: int = 256
    widths: tuple = (8, 16, 32)
    photometric: dict = field(default_factory=lambda: PhotometricParams().to_dict())
    geometric: dict = field(default_factory=lambda: GeometricConfig().to_dict())

    def __post_init__(self):
        self.widths = tuple(self.widths)
        # store nested settings in their JSON form so configs round-trip
        self.photometric = json.loads(json.dumps(dict(self.photometric)))
        self.geometric = json.loads(json.dumps(dict(self.geometric)))
        for name in ("lr0", "power", "epochs", "batch_size", "slic_k", "slic_m", "input_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("isw_weight", "warmup_epochs", "momentum", "weight_decay", "dwt_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.slic_weight <= 1.0:
            raise ValueError("slic_weight must lie in [0, 1]")
        if self.input_size % 8:
            raise ValueError("input_size must be divisible by 8")
        self.slic_loss_config()
        self.photometric_params()
        self.geometric_config()

    # -- derived objects -------------------------------------------------
    def slic_loss_config(self) -> SlicLossConfig:
        return SlicLossConfig.from_weight(self.slic_weight, self.tau, "soft", self.convex_weight)

    def slic_params(self) -> SlicParams:
        return SlicParams(k=int(self.slic_k), m=float(self.slic_m))

    def photometric_params(self) -> PhotometricParams:
        d = dict(self.photometric)
        if "blur_sigma" in d:
            d["blur_sigma"] = tuple(d["blur_sigma"])
        for key in ("brightness", "contrast", "saturation", "hue"):
            if isinstance(d.get(key), list):
                d[key] = tuple(d[key])
        return PhotometricParams(**d)

    def geometric_config(self) -> GeometricConfig:
        return GeometricConfig(**self.geometric)

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def poly_lr(lr0: float, step: int, total_steps: int, power: float = 0.9) -> float:
    """``lr0 * (1 - step / total_steps) ** power``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr0 * (1.0 - step / total_steps) ** power


def combine_losses(l_task: float, isw_terms, l_slic: float, isw_weight: float) -> float:
    """Scalar form of the total objective."""
    return l_task + sum(isw_weight * t for t in isw_terms) + l_slic


@dataclass
class LossBreakdown:
    total: float
    task: float
    slic: float
    isw: list
    isw_weighted: float
    grads: dict = field(repr=False, default_factory=dict)
    terms: dict = field(default_factory=dict)


def _add_grads(acc: dict, new: dict, scale: float = 1.0) -> dict:
    for k, v in new.items():
        acc[k] = acc[k] + scale * v if k in acc else scale * v
    return acc


def total_loss(net: SegNetwork, x, y, cfg: TrainConfig, isw_state: IswState | None,
               epoch: int, seed, grids=None, cache: GridCache | None = None,
               collect: bool = True) -> LossBreakdown:
    """Loss, per-term breakdown and parameter gradients for one batch.

    ``x[N, 3, H, W]``, ``y[N, H, W]`` in ``{0, 1}``. ``grids`` optionally
    supplies one superpixel grid per instance. During warm-up the whitening
    terms are exactly zero but the variance maps are still collected (when
    ``collect``).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    use_isw = cfg.use_isw and isw_state is not None
    # the photometric view is a plain augmentation for every configuration,
    # so ablations differ only in the extra loss terms
    pair = cfg.pair_task_loss or (use_isw and isw_state.collecting(epoch))

    fx = forward(net, x, capture=use_isw)
    ftx = None
    if pair:
        tx = transform_batch(x, cfg.photometric_params(), seed)
        ftx = forward(net, tx, capture=True)

    views = [fx] + ([ftx] if ftx is not None and cfg.pair_task_loss else [])
    vw = 1.0 / len(views)

    # task loss, averaged over the views that carry it
    d_probs = [np.zeros_like(v.probs) for v in views]
    task = 0.0
    for i, v in enumerate(views):
        t = bce(y, v.probs)
        task += vw * float(t.value)
        d_probs[i] += vw * t.backward(1.0)[0]

    slic_val, sg_mean = 0.0, 0.0
    if cfg.use_slic_loss:
        scfg = cfg.slic_loss_config()
        img_hwc = x.transpose(0, 2, 3, 1)
        for i in range(n):
            grid = grids[i] if grids is not None else None
            ls = l_slic(img_hwc[i], y[i], fx.probs[i], scfg, cfg.slic_params(), grid=grid, cache=cache)
            slic_val += float(ls.value) / n
            sg_mean += ls.terms["sg"] / n
            d_probs[0][i] += ls.backward(1.0)[0] / n

    isw_terms = [0.0] * len(HOOKS)
    d_feats = [[None] * len(HOOKS) for _ in views]
    dwt_val = 0.0
    if use_isw:
        covs_x = [covariance(f) for f in fx.features]
        if ftx is not None:
            covs_tx = [covariance(f) for f in ftx.features]
            if collect and isw_state.collecting(epoch):
                for lid, ca, cb in zip(HOOKS, covs_x, covs_tx):
                    isw_update(isw_state, lid, pair_variance(ca.value, cb.value), epoch)
        isw_state.begin_epoch(epoch)
        if isw_state.active(epoch):
            per_view = [covs_x] + ([covs_tx] if len(views) == 2 else [])
            for vi, covs in enumerate(per_view):
                for li, lid in enumerate(HOOKS):
                    lp = isw_loss(covs[li].value, isw_state.mask(lid), cfg.isw_reduction)
                    isw_terms[li] += vw * float(lp.value)
                    g_cov = lp.backward(cfg.isw_weight * vw)[0]
                    d_feats[vi][li] = covs[li].backward(g_cov)[0]
        if cfg.dwt_weight > 0:
            for li, c in enumerate(covs_x):
                dl = dwt_loss(c.value)
                dwt_val += float(dl.value)
                g = covs_x[li].backward(dl.backward(cfg.dwt_weight)[0])[0]
                d_feats[0][li] = g if d_feats[0][li] is None else d_feats[0][li] + g

    total = combine_losses(task, isw_terms, slic_val, cfg.isw_weight) + cfg.dwt_weight * dwt_val
    if not math.isfinite(total):
        raise NonFiniteError(f"non-finite loss at epoch {epoch}: task={task} slic={slic_val} isw={isw_terms}")

    grads = {}
    for v, dp, df in zip(views, d_probs, d_feats):
        _add_grads(grads, v.backward(dp, df))
    isw_weighted = sum(cfg.isw_weight * t for t in isw_terms)
    return LossBreakdown(total, task, slic_val, isw_terms, isw_weighted, grads,
                         {"sg": sg_mean, "dwt": dwt_val})


class SGD:
    """Momentum SGD over a parameter dict."""

    def __init__(self, params: dict, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, lr: float) -> None:
        if lr == 0.0:
            return
        for k, p in self.params.items():
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * p
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p -= lr * v


# --------------------------------------------------------------------------
# data handling
# --------------------------------------------------------------------------

def prepare(images, masks, size: int):
    """Resize to the training resolution (bilinear images, nearest masks)."""
    imgs = [resize_image(im, size, size) for im in images]
    msks = [resize_mask(m, size, size) for m in masks]
    return imgs, msks


def predict_proba(net: SegNetwork, images, batch_size: int = 8) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        out.append(forward(net, to_nchw(images[i:i + batch_size])).probs)
    return np.concatenate(out) if out else np.zeros((0,))


def evaluate(net: SegNetwork, images, masks, threshold: float = 0.5) -> dict:
    """Per-image metrics averaged over a dataset."""
    probs = predict_proba(net, images)
    per = [metrics_from(confusion(p, m, threshold)) for p, m in zip(probs, masks)]
    return {k: float(np.mean([r[k] for r in per])) for k in per[0]} if per else {}


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    timing: list = field(default_factory=list)

    def write(self, out_dir) -> None:
        with open(os.path.join(out_dir, "runlog.jsonl"), "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.write(json.dumps({"config": self.config}, sort_keys=True) + "\n")
        with open(os.path.join(out_dir, "timing.jsonl"), "w") as fh:
            for rec in self.timing:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def losses(self, key: str = "loss_task") -> list:
        return [r[key] for r in self.records]


def _sample_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def fit_arrays(cfg: TrainConfig, train_images, train_masks, val_images=None, val_masks=None,
               out_dir=None, cache: GridCache | None = None, progress=None):
    """Train on in-memory data; returns ``(best_net, last_net, runlog)``.

    The best network is chosen by source validation IoU (training loss when
    no validation data is given).
    """
    if not train_images:
        raise TrainingError("empty training set")
    size = cfg.input_size
    imgs, msks = prepare(train_images, train_masks, size)
    if val_images:
        vimgs, vmsks = prepare(val_images, val_masks, size)
    else:
        vimgs, vmsks = [], []

    net = build(cfg.widths, seed=cfg.seed)
    opt = SGD(net.params, cfg.momentum, cfg.weight_decay)
    isw_state = IswState(HOOKS, cfg.warmup_epochs, cfg.isw_recluster, seed=cfg.seed) if cfg.use_isw else None
    cache = cache if cache is not None else GridCache()
    geo = cfg.geometric_config()

    n = len(imgs)
    bs = cfg.batch_size
    steps_per_epoch = math.ceil(n / bs)
    total_steps = steps_per_epoch * cfg.epochs
    step = 0
    runlog = RunLog(config=cfg.to_dict())
    best_score, best_net = -np.inf, net.copy()

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch, 7]).permutation(n)
        sums = {"loss_total": 0.0, "loss_task": 0.0, "loss_slic": 0.0, "loss_isw": 0.0, "loss_sg": 0.0}
        if isw_state is not None:
            isw_state.begin_epoch(epoch)
        for b in range(steps_per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            batch_img, batch_mask = [], []
            for i in idx:
                im, mk = geometric_augment(imgs[i], msks[i], geo, _sample_seed(cfg.seed, epoch, i, 1))
                batch_img.append(im)
                batch_mask.append(mk)
            x = to_nchw(batch_img)
            y = np.stack(batch_mask).astype(np.float64)
            lr = poly_lr(cfg.lr0, step, total_steps, cfg.power)
            br = total_loss(net, x, y, cfg, isw_state, epoch,
                            seed=_sample_seed(cfg.seed, epoch, b, 2), cache=cache)
            opt.step(br.grads, lr)
            step += 1
            sums["loss_total"] += br.total
            sums["loss_task"] += br.task
            sums["loss_slic"] += br.slic
            sums["loss_isw"] += br.isw_weighted
            sums["loss_sg"] += br.terms["sg"]
        rec = {k: v / steps_per_epoch for k, v in sums.items()}
        rec["epoch"] = epoch
        rec["lr"] = poly_lr(cfg.lr0, step, total_steps, cfg.power)
        rec["isw_active"] = bool(isw_state is not None and isw_state.active(epoch))
        if vimgs:
            rec["val_iou"] = evaluate(net, vimgs, vmsks)["iou"]
            score = rec["val_iou"]
        else:
            score = -rec["loss_total"]
        if not all(math.isfinite(v) for v in rec.values() if isinstance(v, float)):
            raise TrainingError(f"non-finite epoch record: {rec}")
        if score > best_score:
            best_score, best_net = score, net.copy()
        runlog.records.append(rec)
        runlog.timing.append({"epoch": epoch, "wall_time": time.perf_counter() - t0})
        log.info("epoch %d %s", epoch, {k: round(v, 5) if isinstance(v, float) else v for k, v in rec.items()})
        if progress is not None:
            progress(rec)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        meta = {"config_hash": config_hash(cfg.to_dict()), "best_val_iou": best_score,
                "epochs": cfg.epochs, "seed": cfg.seed, "input_size": cfg.input_size,
                "config": cfg.to_dict()}
        save_checkpoint(best_net, os.path.join(out_dir, "best.ckpt"), meta)
        runlog.write(out_dir)
    return best_net, net, runlog


def train_loop(cfg: TrainConfig, train_dir, val_dir, out_dir, cache: GridCache | None = None,
               progress=None):
    """Train from dataset directories; writes ``best.ckpt`` and ``runlog.jsonl``.

    ``train_dir`` and ``val_dir`` may be the same manifest-backed dataset, in
    which case the ``train`` and ``val`` splits are used.
    """
    from .synthdata import load_dataset

    for d in (train_dir, val_dir):
        if not os.path.isdir(d):
            raise FileNotFoundError(f"data directory not found: {d}")
    same = os.path.abspath(train_dir) == os.path.abspath(val_dir)
    _, timgs, tmsks = load_dataset(train_dir, "train" if same or _has_manifest(train_dir) else None)
    _, vimgs, vmsks = load_dataset(val_dir, "val" if same or _has_manifest(val_dir) else None)
    if not timgs:
        raise TrainingError(f"empty training set in {train_dir}")
    best, _, runlog = fit_arrays(cfg, timgs, tmsks, vimgs, vmsks, out_dir, cache, progress)
    return best, runlog


def _has_manifest(d) -> bool:
    return os.path.exists(os.path.join(d, "manifest.json"))


# --------------------------------------------------------------------------
# hyperparameter grid
# --------------------------------------------------------------------------

GRID = (
    ("lambda", "slic_weight", (0.50, 0.75, 1.00), {"slic_k": 100, "slic_m": 40.0}),
    ("k", "slic_k", (50, 150, 500, 1000), {"slic_weight": 0.75, "slic_m": 40.0}),
    ("m", "slic_m", (20.0, 30.0, 50.0), {"slic_weight": 0.75, "slic_k": 100}),
)


def grid_rows():
    """``(parameter, field, value, fixed)`` for the ten grid cells."""
    for label, fname, values, fixed in GRID:
        for v in values:
            yield label, fname, v, dict(fixed)


def grid_search(base_cfg: TrainConfig, source, target, progress=None) -> list:
    """Vary one hyperparameter at a time with the others fixed.

    ``source`` is ``(train_images, train_masks, val_images, val_masks)`` and
    ``target`` is ``(images, masks)``. Returns one dict per row; within each
    parameter group the row with the best source IoU gets ``best=True``.
    """
    cache = GridCache()
    rows = []
    for label, fname, value, fixed in grid_rows():
        cfg = replace(base_cfg, **fixed, **{fname: value}, use_slic_loss=True)
        best, _, _ = fit_arrays(cfg, source[0], source[1], source[2], source[3], cache=cache)
        timgs, tmsks = prepare(target[0], target[1], cfg.input_size)
        vimgs, vmsks = prepare(source[2], source[3], cfg.input_size)
        row = {"parameter": label, "value": value, "fixed": fixed,
               "source_iou": evaluate(best, vimgs, vmsks)["iou"],
               "target_iou": evaluate(best, timgs, tmsks)["iou"]}
        rows.append(row)
        if progress is not None:
            progress(row)
    for label, _, _, _ in GRID:
        group = [r for r in rows if r["parameter"] == label]
        top = max(group, key=lambda r: r["source_iou"])
        for r in group:
            r["best"] = r is top
    return rows


def format_grid(rows) -> str:
    """Aligned text version of the grid table."""
    lines = [f"{'':<8}{'Hyperparameter':<18}{'Source IoU':>12}{'Target IoU':>12}  Fixed Parameters"]
    last = None
    for r in rows:
        label = r["parameter"] if r["parameter"] != last else ""
        last = r["parameter"]
        if r["parameter"] == "lambda":
            hp = f"Weight {100 * r['value']:.0f}%"
        elif r["parameter"] == "k":
            hp = f"{r['value']} Superpixels"
        else:
            hp = f"{r['value']:g} Consistency"
        if r.get("best"):
            hp += "*"
        fixed = ", ".join(f"{k}={v:g}" for k, v in r["fixed"].items())
        lines.append(f"{label:<8}{hp:<18}{100 * r['source_iou']:>12.1f}{100 * r['target_iou']:>12.1f}  {fixed}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# domain-generalization experiment
# --------------------------------------------------------------------------

@dataclass
class DgResult:
    seed: int
    arm: str
    source_iou: float
    target_iou: float
    seconds: float


def dg_splits(n_source: int = 200, n_target: int = 50, size: int = 128, data_seed: int = 1):
    """Synthetic source (train/val/test) and target sets sharing one geometry stream.

    Target samples use the same per-index seeds as the source test samples'
    successors, so no target image duplicates a training image's layout.
    """
    from .synthdata import SOURCE, TARGET, gen_sample, sample_seed, split_counts

    src = [gen_sample(SOURCE, size, sample_seed(data_seed, i)) for i in range(n_source)]
    tgt = [gen_sample(TARGET, size, sample_seed(data_seed, n_source + i)) for i in range(n_target)]
    n_train, n_val, _ = split_counts(n_source)
    order = np.random.default_rng([data_seed, 99]).permutation(n_source)
    parts = [order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]]
    unzip = lambda idx: ([src[i][0] for i in idx], [src[i][1] for i in idx])  # noqa: E731
    return {"train": unzip(parts[0]), "val": unzip(parts[1]), "test": unzip(parts[2]),
            "target": ([t[0] for t in tgt], [t[1] for t in tgt])}


def dg_experiment(base_cfg: TrainConfig, seeds=range(5), data=None, progress=None) -> list:
    """Train the baseline (both extra losses off) and the full method per seed.

    Both arms see identical data, augmentation and photometric views; they
    differ only in the superpixel and whitening terms. The checkpoint is
    picked on source validation IoU; target data is only used for scoring.
    """
    data = data if data is not None else dg_splits(size=base_cfg.input_size)
    arms = (("baseline", replace(base_cfg, use_slic_loss=False, use_isw=False)),
            ("full", replace(base_cfg, use_slic_loss=True, use_isw=True)))
    cache = GridCache()
    results = []
    for arm, cfg in arms:
        for seed in seeds:
            t0 = time.perf_counter()
            best, _, _ = fit_arrays(replace(cfg, seed=int(seed)), *data["train"], *data["val"], cache=cache)
            res = DgResult(int(seed), arm,
                           evaluate(best, *prepare(*data["test"], cfg.input_size))["iou"],
                           evaluate(best, *prepare(*data["target"], cfg.input_size))["iou"],
                           time.perf_counter() - t0)
            results.append(res)
            if progress is not None:
                progress(res)
    return results


def dg_summary(results) -> dict:
    out = {}
    for arm in ("baseline", "full"):
        rs = [r for r in results if r.arm == arm]
        out[arm] = {"source_iou": float(np.mean([r.source_iou for r in rs])),
                    "target_iou": float(np.mean([r.target_iou for r in rs])),
                    "n": len(rs)}
    return out
