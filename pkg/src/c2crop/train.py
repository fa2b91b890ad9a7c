"""Optimization loop, Adam, two-stage head re-training, checkpoint I/O.

Everything is deterministic given the config seed: parameter init, batch
shuffles, augmentation and oversampling draws all derive from fixed
subseeds, and per-epoch streams depend only on (seed, epoch) so a resumed
run continues bit-identically.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import losses as L
from . import tensor as T
from .data import batch_iter
from .metrics import MetricsReport, evaluate
from .model import (
    EncoderConfig,
    clone_params,
    encode_pooled,
    head_param_names,
    heads_forward,
    init_params,
    make_predict_fn,
    model_forward,
)
from .tensor import Tensor

LOSS_MODES = ("l1_only", "c2c", "focal_r", "inv", "lds", "smogn", "rrt_inv")


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; names the epoch and batch."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_mode: str = "c2c"
    seed: int = 0
    augment: bool = True
    bins: int = 50  # histogram bins for inv/lds reweighting
    lds_kernel_sigma: float = 2.0
    smogn_noise_sigma: float = 0.05
    smogn_noise_clip: float = 0.10

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.loss_mode!r}; choose from {LOSS_MODES}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_mode in ("c2c", "smogn") and self.batch_size < 2:
            raise ValueError(f"loss mode {self.loss_mode} needs batch_size >= 2 (pairs)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.bins < 1:
            raise ValueError("bins must be >= 1")


NS_SMOGN = 303  # seed-sequence namespace for oversampling draws

# offset applied to the shuffle seed of the head re-training stage so its
# epoch streams differ from stage 1's
STAGE2_SEED_OFFSET = 1_000_003


class Adam:
    """Standard bias-corrected Adam over a name -> Tensor parameter dict.

    Parameters with a None gradient are treated as zero-gradient: their
    moments decay and the values stay put.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.names = sorted(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(params[k].data) for k in self.names}
        self.v = {k: np.zeros_like(params[k].data) for k in self.names}

    def zero_grad(self) -> None:
        for k in self.names:
            self.params[k].zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in self.names:
            p = self.params[k]
            g = p.grad if p.grad is not None else 0.0
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * np.square(g)
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.names:
            out[f"optim.m.{k}"] = self.m[k]
            out[f"optim.v.{k}"] = self.v[k]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for k in self.names:
            self.m[k] = arrays[f"optim.m.{k}"].copy()
            self.v[k] = arrays[f"optim.v.{k}"].copy()


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    best_params: dict[str, Tensor]
    best_epoch: int
    log: list[dict]
    train_target_mean: np.ndarray
    optimizer: Adam | None = None


def _epoch_record(epoch, sums, n_batches, n_pos, n_neg, report: MetricsReport) -> dict:
    rec = {
        "epoch": epoch,
        "l1": sums["l1"] / n_batches,
        "align": sums["align"] / n_batches,
        "uniform": sums["uniform"] / n_batches,
        "total": sums["total"] / n_batches,
        "pos_pairs": n_pos,
        "neg_pairs": n_neg,
    }
    for g in ("All", "Many", "Medium", "Few"):
        rec[f"val_iou_{g.lower()}"] = report.iou[g]
        rec[f"val_bde_{g.lower()}"] = report.bde[g]
    return rec


def _batch_loss(
    images: np.ndarray,
    targets: np.ndarray,
    size_ratios: np.ndarray,
    params: dict[str, Tensor],
    enc: EncoderConfig,
    cfg: TrainConfig,
    weights: L.LossWeights,
    bin_table: np.ndarray | None,
    smogn_rng: np.random.Generator | None,
    freeze_features: bool,
) -> L.LossBreakdown:
    mode = cfg.loss_mode
    if freeze_features:
        with T.no_grad():
            pooled = encode_pooled(Tensor(images), params, enc)
        pooled = {d: Tensor(v.data) for d, v in pooled.items()}
        pred = heads_forward(pooled, params)
    elif mode == "smogn":
        pooled = encode_pooled(Tensor(images), params, enc)
        pooled, targets, _ = L.smogn_augment(
            pooled,
            targets,
            size_ratios,
            smogn_rng,
            noise_sigma=cfg.smogn_noise_sigma,
            noise_clip=cfg.smogn_noise_clip,
        )
        pred = heads_forward(pooled, params)
    else:
        pred, pooled = model_forward(Tensor(images), params, enc)

    zero = Tensor(0.0)
    if mode == "c2c":
        return L.total_loss(pred, targets, pooled, weights)
    l1 = L.l1_loss(pred, targets)
    if mode in ("l1_only", "smogn"):
        total = l1
    elif mode == "focal_r":
        total = L.focal_r_loss(L.per_sample_l1(pred, targets), weights)
    elif mode in ("inv", "lds", "rrt_inv"):
        w = L.bin_weights_for_targets(targets, bin_table)
        total = L.weighted_l1_loss(pred, targets, w)
    else:  # pragma: no cover - guarded by TrainConfig validation
        raise ValueError(f"unhandled loss mode {mode}")
    return L.LossBreakdown(l1=l1, align=zero, uniform=zero, total=total)


def train_loop(
    train_ds,
    val_ds,
    enc: EncoderConfig,
    cfg: TrainConfig,
    weights: L.LossWeights | None = None,
    params: dict[str, Tensor] | None = None,
    freeze_features: bool = False,
    start_epoch: int = 0,
    optimizer_state: tuple[dict[str, np.ndarray], int] | None = None,
    shuffle_seed: int | None = None,
) -> TrainResult:
    """Run `cfg.epochs` epochs; validation after every epoch.

    `freeze_features` trains only the regression heads on detached pooled
    features (stage 2 of head re-training). `start_epoch`/`optimizer_state`
    continue an interrupted run bit-identically.
    """
    weights = weights or L.LossWeights()
    if shuffle_seed is None:
        shuffle_seed = cfg.seed
    if params is None:
        params = init_params(enc, seed=cfg.seed)

    y_train = train_ds.target_matrix()
    train_target_mean = y_train.mean(axis=0) if len(y_train) else np.full(4, 0.5)

    bin_table = None
    if cfg.loss_mode in ("inv", "rrt_inv"):
        bin_table = L.per_boundary_bin_weights(y_train, cfg.bins)
    elif cfg.loss_mode == "lds":
        bin_table = L.per_boundary_bin_weights(y_train, cfg.bins, cfg.lds_kernel_sigma)

    trainable = (
        {k: params[k] for k in head_param_names(params)} if freeze_features else params
    )
    optimizer = Adam(trainable, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    if optimizer_state is not None:
        optimizer.load_state(*optimizer_state)

    best_params = clone_params(params)
    best_epoch = -1
    best_iou = -np.inf
    log: list[dict] = []

    for epoch in range(start_epoch, cfg.epochs):
        smogn_rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, NS_SMOGN, epoch])
        )
        sums = {"l1": 0.0, "align": 0.0, "uniform": 0.0, "total": 0.0}
        n_pos = n_neg = 0
        n_batches = 0
        for b_idx, batch in enumerate(
            batch_iter(
                train_ds, cfg.batch_size, shuffle_seed, epoch=epoch, augment=cfg.augment
            )
        ):
            optimizer.zero_grad()
            breakdown = _batch_loss(
                batch.images,
                batch.targets,
                batch.size_ratios,
                params,
                enc,
                cfg,
                weights,
                bin_table,
                smogn_rng,
                freeze_features,
            )
            total = float(breakdown.total.data)
            if not np.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {b_idx}"
                )
            T.backward(breakdown.total)
            optimizer.step()
            sums["l1"] += float(breakdown.l1.data)
            sums["align"] += float(breakdown.align.data)
            sums["uniform"] += float(breakdown.uniform.data)
            sums["total"] += total
            n_pos += breakdown.pos_pairs
            n_neg += breakdown.neg_pairs
            n_batches += 1

        report = evaluate(make_predict_fn(params, enc), val_ds)
        log.append(_epoch_record(epoch, sums, max(n_batches, 1), n_pos, n_neg, report))
        iou_all = report.iou["All"]
        if iou_all is not None and iou_all > best_iou:
            best_iou = iou_all
            best_epoch = epoch
            best_params = clone_params(params)

    return TrainResult(
        params=params,
        best_params=best_params,
        best_epoch=best_epoch,
        log=log,
        train_target_mean=train_target_mean,
        optimizer=optimizer,
    )


@dataclass
class RRTResult:
    stage1: TrainResult
    stage2: TrainResult


def rrt_schedule(
    train_ds,
    val_ds,
    enc: EncoderConfig,
    cfg: TrainConfig,
    weights: L.LossWeights | None = None,
) -> RRTResult:
    """Two-stage schedule: plain feature training, then inverse-weighted
    re-training of the regression heads only, for the same epoch count."""
    stage1_cfg = replace(cfg, loss_mode="l1_only")
    stage1 = train_loop(train_ds, val_ds, enc, stage1_cfg, weights)
    stage2_cfg = replace(cfg, loss_mode="rrt_inv")
    stage2 = train_loop(
        train_ds,
        val_ds,
        enc,
        stage2_cfg,
        weights,
        params=clone_params(stage1.params),  # stage 1 result stays a snapshot
        freeze_features=True,
        shuffle_seed=cfg.seed + STAGE2_SEED_OFFSET,
    )
    return RRTResult(stage1=stage1, stage2=stage2)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"C2CK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    encoder: EncoderConfig
    epoch: int
    arrays: dict[str, np.ndarray]  # params plus optional optim.m/optim.v entries
    optim_t: int | None = None
    meta: dict = field(default_factory=dict)

    def model_params(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {
            k: Tensor(v.copy(), requires_grad=requires_grad)
            for k, v in self.arrays.items()
            if not k.startswith("optim.")
        }

    def optimizer_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if k.startswith("optim.")}


def save_checkpoint(
    path,
    params: dict[str, Tensor],
    enc: EncoderConfig,
    epoch: int,
    optimizer: Adam | None = None,
    meta: dict | None = None,
) -> None:
    """Binary format: magic, version u32 LE, manifest length u64 LE, JSON
    manifest of (name, dtype, shape) entries, then raw little-endian float64
    payloads in manifest order. Saving is byte-deterministic."""
    arrays: dict[str, np.ndarray] = {k: p.data for k, p in params.items()}
    optim_t = None
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
        optim_t = optimizer.t
    names = sorted(arrays)
    manifest = {
        "encoder": asdict(enc),
        "epoch": int(epoch),
        "optim_t": optim_t,
        "meta": meta or {},
        "entries": [
            {"name": k, "dtype": "float64", "shape": list(arrays[k].shape)} for k in names
        ],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint version {version} "
            f"(expected {CHECKPOINT_VERSION})"
        )
    (blob_len,) = struct.unpack_from("<Q", raw, 8)
    start = 16
    if len(raw) < start + blob_len:
        raise ValueError(f"{path}: truncated checkpoint (manifest)")
    manifest = json.loads(raw[start : start + blob_len].decode("utf-8"))
    pos = start + blob_len
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        if len(raw) < pos + nbytes:
            raise ValueError(f"{path}: truncated checkpoint (payload {entry['name']})")
        arr = np.frombuffer(raw[pos : pos + nbytes], dtype="<f8").reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
        pos += nbytes
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes after payloads")
    return Checkpoint(
        encoder=EncoderConfig(**{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in manifest["encoder"].items()
        }),
        epoch=manifest["epoch"],
        arrays=arrays,
        optim_t=manifest["optim_t"],
        meta=manifest.get("meta", {}),
    )
