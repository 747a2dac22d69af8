"""Two-stage training with multi-size whole-image batches.

Stage 1 trains the gradient network alone against the SI loss. The joint
stage then fine-tunes both networks end to end against the combined loss,
dropping the learning rate once after ``joint_epochs_a`` epochs. Epochs are
numbered from 1.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .exceptions import ConfigurationError, IntegrityError, SchemaVersionError
from .image_model import Resolution, atomic_write_bytes, gradient_magnitude, resize
from .metrics import DEFAULT_SSIM, LossWeights, SsimConfig, l1_loss, loss_si, total_loss
from .network import ABLATIONS, ConcurrentNet, gin_input
from .synthesis import iter_triplets, read_manifest

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1
LOG_COLUMNS = ("stage", "epoch", "step", "size", "lr", "total", "ssim_b", "l1_b", "ssim_r", "si_grad")
STAGES = ("stage1", "joint")


@dataclass
class TrainConfig:
    stage1_epochs: int = 40
    stage1_lr: float = 1e-4
    joint_epochs_a: int = 30
    lr_a: float = 1e-4
    joint_epochs_b: int = 20
    lr_b: float = 1e-5
    batch_size: int = 4
    sizes: list = field(default_factory=lambda: [Resolution(96, 160), Resolution(224, 288)])
    seed: int = 0
    gamma: float = 0.8
    base_channels: int = 16
    ablation: str = "full"
    deterministic: bool = False
    optimizer: str = "adam"

    def __post_init__(self):
        self.sizes = [Resolution.parse(s) for s in self.sizes]
        self.validate()

    def validate(self):
        for name in ("stage1_epochs", "joint_epochs_a", "joint_epochs_b", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("stage1_lr", "lr_a", "lr_b"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.sizes:
            raise ConfigurationError("at least one training size is required")
        for s in self.sizes:
            if not s.network_compatible:
                raise ConfigurationError(f"training size {s} is not divisible by 32")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        LossWeights(self.gamma)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.gamma)

    @property
    def joint_epochs(self) -> int:
        return self.joint_epochs_a + self.joint_epochs_b

    def echo(self) -> dict:
        d = asdict(self)
        d["sizes"] = [str(s) for s in self.sizes]
        d["optimizer_betas"] = [0.9, 0.999]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


def learning_rate(cfg: TrainConfig, stage: str, epoch: int) -> float:
    """Learning rate for a 1-based ``epoch`` of ``stage``."""
    if stage == "stage1":
        return cfg.stage1_lr
    if stage == "joint":
        return cfg.lr_a if epoch <= cfg.joint_epochs_a else cfg.lr_b
    raise ValueError(f"unknown stage {stage!r}")


def set_determinism(enabled: bool, seed: int = 0) -> None:
    torch.manual_seed(seed)
    if enabled:
        torch.use_deterministic_algorithms(True)
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")


def determinism_from_env() -> bool:
    return os.environ.get("CRRN_DETERMINISTIC", "") == "1"


class TripletDataset:
    """In-memory mixtures, backgrounds and reflections (``H x W x 3`` float32)."""

    def __init__(self, mixtures, backgrounds, reflections, ids=None):
        if not (len(mixtures) == len(backgrounds) == len(reflections)):
            raise ConfigurationError("mixtures, backgrounds and reflections must have equal lengths")
        self.mixtures = [np.asarray(m, dtype=np.float32) for m in mixtures]
        self.backgrounds = [np.asarray(b, dtype=np.float32) for b in backgrounds]
        self.reflections = [np.asarray(r, dtype=np.float32) for r in reflections]
        self.ids = list(ids) if ids is not None else [f"{i:05d}" for i in range(len(self.mixtures))]
        self._cache = {}

    @classmethod
    def from_manifest(cls, manifest) -> "TripletDataset":
        if not isinstance(manifest, dict):
            manifest = read_manifest(manifest)
        triplets = list(iter_triplets(manifest))
        return cls(
            [t.mixture for t in triplets],
            [t.background for t in triplets],
            [t.reflection for t in triplets],
            [t.id for t in triplets],
        )

    def __len__(self):
        return len(self.mixtures)

    def resized(self, index: int, size: Resolution):
        key = (index, size)
        if key not in self._cache:
            m = resize(self.mixtures[index], size)
            b = resize(self.backgrounds[index], size)
            r = resize(self.reflections[index], size)
            self._cache[key] = (m, b, r, gradient_magnitude(b))
        return self._cache[key]


@dataclass
class Batch:
    size: Resolution
    indices: list
    mixture: torch.Tensor
    background: torch.Tensor
    reflection: torch.Tensor
    gradient: torch.Tensor


def _stack(arrays) -> torch.Tensor:
    arr = np.stack(arrays)
    if arr.ndim == 3:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def multi_size_batcher(dataset: TripletDataset, cfg: TrainConfig, rng: np.random.Generator, epochs=1):
    """Yield whole-image batches, one size drawn uniformly per batch.

    Each epoch visits every image once in a shuffled order. ``epochs=None``
    streams forever.
    """
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            idx = [int(i) for i in order[start:start + cfg.batch_size]]
            size = cfg.sizes[int(rng.integers(len(cfg.sizes)))]
            items = [dataset.resized(i, size) for i in idx]
            yield Batch(
                size=size,
                indices=idx,
                mixture=_stack([it[0] for it in items]),
                background=_stack([it[1] for it in items]),
                reflection=_stack([it[2] for it in items]),
                gradient=_stack([it[3] for it in items]),
            )
        epoch += 1


def epoch_rng(cfg: TrainConfig, stage: str, epoch: int) -> np.random.Generator:
    """Batch order depends only on (seed, stage, epoch), which makes resuming exact."""
    return np.random.default_rng([int(cfg.seed), STAGES.index(stage), int(epoch)])


class TrainLog:
    def __init__(self, records=None):
        self.records = list(records or [])

    def append(self, record: dict) -> None:
        if self.records:
            last = self.records[-1]
            prev = (STAGES.index(last["stage"]), last["epoch"], last["step"])
            cur = (STAGES.index(record["stage"]), record["epoch"], record["step"])
            if cur <= prev:
                raise ValueError(f"log records must be strictly increasing, got {cur} after {prev}")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def for_stage(self, stage: str) -> list:
        return [r for r in self.records if r["stage"] == stage]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for r in self.records:
            writer.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in LOG_COLUMNS])
        return buf.getvalue()

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_csv().encode("utf-8"))

    @classmethod
    def load(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                log.records.append({
                    "stage": rec["stage"], "epoch": int(rec["epoch"]), "step": int(rec["step"]),
                    "size": rec["size"], **{c: float(rec[c]) for c in LOG_COLUMNS[4:]},
                })
        return log


@dataclass
class Checkpoint:
    gin: dict
    iin: dict | None
    optimizer: dict | None
    stage: str
    epoch: int
    config: dict
    schema_version: int = CHECKPOINT_SCHEMA_VERSION

    def build_model(self) -> ConcurrentNet:
        net = ConcurrentNet(int(self.config.get("base_channels", 16)))
        net.gin.load_state_dict(self.gin)
        if self.iin is not None:
            net.iin.load_state_dict(self.iin)
        net.eval()
        return net


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``<path>`` (tensor blob) and ``<path>.json`` (metadata); both atomically."""
    path = Path(path)
    buf = io.BytesIO()
    torch.save({"gin": ckpt.gin, "iin": ckpt.iin, "optimizer": ckpt.optimizer}, buf)
    blob = buf.getvalue()
    meta = {
        "schema_version": ckpt.schema_version,
        "stage": ckpt.stage,
        "epoch": int(ckpt.epoch),
        "config": ckpt.config,
        "has_iin": ckpt.iin is not None,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "blob": path.name,
    }
    atomic_write_bytes(path, blob)
    atomic_write_bytes(_sidecar(path), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def read_checkpoint_meta(path) -> dict:
    path = Path(path)
    side = _sidecar(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    if not side.is_file():
        raise IntegrityError(f"checkpoint metadata {side} is missing")
    try:
        meta = json.loads(side.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"checkpoint metadata {side} is corrupt: {exc}") from exc
    version = meta.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise SchemaVersionError(
            f"checkpoint schema {version} is not supported (this build reads {CHECKPOINT_SCHEMA_VERSION})"
        )
    return meta


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    meta = read_checkpoint_meta(path)
    blob = path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != meta.get("sha256"):
        raise IntegrityError(f"checkpoint {path} does not match its recorded checksum (truncated or corrupt)")
    try:
        payload = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of types for bad pickles
        raise IntegrityError(f"checkpoint {path} cannot be decoded: {exc}") from exc
    return Checkpoint(
        gin=payload["gin"],
        iin=payload["iin"],
        optimizer=payload["optimizer"],
        stage=meta["stage"],
        epoch=int(meta["epoch"]),
        config=meta["config"],
        schema_version=meta["schema_version"],
    )


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _as_float(t) -> float:
    return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)


def _checkpoint_path(directory, stage, epoch) -> Path:
    return Path(directory) / f"{stage}_epoch{epoch:04d}.pt"


def _save_epoch(ckpt: Checkpoint, directory, keep_last=None) -> None:
    """Save an epoch checkpoint; with ``keep_last`` delete all but the newest ``keep_last``."""
    save_checkpoint(ckpt, _checkpoint_path(directory, ckpt.stage, ckpt.epoch))
    if keep_last is None:
        return
    found = []
    for p in Path(directory).glob("*_epoch*.pt"):
        stage, _, ep = p.stem.rpartition("_epoch")
        if stage in STAGES and ep.isdigit():
            found.append(((STAGES.index(stage), int(ep)), p))
    for _, p in sorted(found)[:-keep_last]:
        p.unlink(missing_ok=True)
        _sidecar(p).unlink(missing_ok=True)


def latest_checkpoint(directory):
    """Most advanced checkpoint in ``directory`` by (stage, epoch), or None."""
    best, best_key = None, None
    for p in Path(directory).glob("*_epoch*.pt"):
        stage, _, ep = p.stem.rpartition("_epoch")
        if stage not in STAGES or not ep.isdigit():
            continue
        key = (STAGES.index(stage), int(ep))
        if best_key is None or key > best_key:
            best, best_key = p, key
    return best


def train_stage1(gin, dataset: TripletDataset, cfg: TrainConfig, log: TrainLog | None = None,
                 start_epoch: int = 1, optimizer_state=None, checkpoint_dir=None,
                 ssim_cfg: SsimConfig = DEFAULT_SSIM, keep_last=None):
    """Optimize the gradient network alone against the SI loss.

    Returns ``(gin, log)``.
    """
    if len(dataset) == 0:
        raise ConfigurationError("training dataset is empty")
    log = log if log is not None else TrainLog()
    optimizer = torch.optim.Adam(gin.parameters(), lr=cfg.stage1_lr)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    gin.train()
    spe = steps_per_epoch(len(dataset), cfg.batch_size)
    for epoch in range(start_epoch, cfg.stage1_epochs + 1):
        lr = learning_rate(cfg, "stage1", epoch)
        _set_lr(optimizer, lr)
        for i, batch in enumerate(multi_size_batcher(dataset, cfg, epoch_rng(cfg, "stage1", epoch))):
            pred = gin(gin_input(batch.mixture)).gradient
            loss = loss_si(batch.gradient, pred, ssim_cfg)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            value = _as_float(loss)
            log.append({
                "stage": "stage1", "epoch": epoch, "step": (epoch - 1) * spe + i + 1, "size": str(batch.size),
                "lr": lr, "total": value, "ssim_b": math.nan, "l1_b": math.nan, "ssim_r": math.nan,
                "si_grad": value,
            })
        logger.info("stage1 epoch %d/%d loss %.4f", epoch, cfg.stage1_epochs, log.records[-1]["total"])
        if checkpoint_dir is not None:
            ckpt = Checkpoint(gin.state_dict(), None, optimizer.state_dict(), "stage1", epoch, cfg.echo())
            _save_epoch(ckpt, checkpoint_dir, keep_last)
    return gin, log


def train_joint(gin, iin, dataset: TripletDataset, cfg: TrainConfig, log: TrainLog | None = None,
                start_epoch: int = 1, optimizer_state=None, checkpoint_dir=None,
                ssim_cfg: SsimConfig = DEFAULT_SSIM, keep_last=None):
    """Fine-tune both networks end to end; returns ``(Checkpoint, log)``.

    ``cfg.ablation`` selects the variant: ``iin_only`` feeds an all-zero
    guidance pyramid and drops the gradient term, ``l1_only`` trains against
    the background L1 term alone.
    """
    if len(dataset) == 0:
        raise ConfigurationError("training dataset is empty")
    log = log if log is not None else TrainLog()
    guided = cfg.ablation != "iin_only"
    params = list(iin.parameters()) + (list(gin.parameters()) if guided else [])
    optimizer = torch.optim.Adam(params, lr=cfg.lr_a)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    gin.train()
    iin.train()
    spe = steps_per_epoch(len(dataset), cfg.batch_size)
    weights = cfg.loss_weights
    ckpt = None
    for epoch in range(start_epoch, cfg.joint_epochs + 1):
        lr = learning_rate(cfg, "joint", epoch)
        _set_lr(optimizer, lr)
        for i, batch in enumerate(multi_size_batcher(dataset, cfg, epoch_rng(cfg, "joint", epoch))):
            if guided:
                g = gin(gin_input(batch.mixture))
                out = iin(batch.mixture, g.pyramid)
                total, parts = total_loss(
                    batch.background, out.background, batch.reflection, out.reflection,
                    batch.gradient, g.gradient, weights, ssim_cfg, return_components=True,
                )
            else:
                out = iin(batch.mixture, None)
                total, parts = total_loss(
                    batch.background, out.background, batch.reflection, out.reflection,
                    batch.gradient, batch.gradient, weights, ssim_cfg, return_components=True,
                )
                parts["si_grad"] = torch.tensor(math.nan)
                total = weights.gamma * parts["ssim_b"] + parts["l1_b"] + parts["ssim_r"]
            if cfg.ablation == "l1_only":
                total = l1_loss(batch.background, out.background)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            log.append({
                "stage": "joint", "epoch": epoch, "step": (epoch - 1) * spe + i + 1, "size": str(batch.size),
                "lr": lr, "total": _as_float(total), **{k: _as_float(v) for k, v in parts.items()},
            })
        logger.info("joint epoch %d/%d loss %.4f", epoch, cfg.joint_epochs, log.records[-1]["total"])
        ckpt = Checkpoint(gin.state_dict(), iin.state_dict(), optimizer.state_dict(), "joint", epoch, cfg.echo())
        if checkpoint_dir is not None:
            _save_epoch(ckpt, checkpoint_dir, keep_last)
    if ckpt is None:
        ckpt = Checkpoint(gin.state_dict(), iin.state_dict(), optimizer.state_dict(), "joint",
                          cfg.joint_epochs, cfg.echo())
    return ckpt, log


def train(dataset: TripletDataset, cfg: TrainConfig, checkpoint_dir=None, stages=("stage1", "joint"),
          resume: Checkpoint | None = None, log: TrainLog | None = None,
          ssim_cfg: SsimConfig = DEFAULT_SSIM, keep_last=None):
    """Run the requested stages in order, optionally resuming from a checkpoint.

    Every epoch writes a checkpoint to ``checkpoint_dir``; ``keep_last`` bounds
    how many are kept on disk. Returns ``(model, last checkpoint, log)``.
    """
    set_determinism(cfg.deterministic, cfg.seed)
    net = ConcurrentNet(cfg.base_channels)
    log = log if log is not None else TrainLog()
    start = {"stage1": 1, "joint": 1}
    opt_state = {"stage1": None, "joint": None}
    if resume is not None:
        net.gin.load_state_dict(resume.gin)
        if resume.iin is not None:
            net.iin.load_state_dict(resume.iin)
        start[resume.stage] = resume.epoch + 1
        opt_state[resume.stage] = resume.optimizer
        if resume.stage == "joint":
            start["stage1"] = cfg.stage1_epochs + 1
    if keep_last is not None and keep_last < 1:
        raise ConfigurationError(f"keep_last must be >= 1, got {keep_last}")
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    ckpt = resume
    run_stage1 = "stage1" in stages and cfg.ablation != "iin_only"
    if run_stage1 and start["stage1"] <= cfg.stage1_epochs:
        train_stage1(net.gin, dataset, cfg, log, start["stage1"], opt_state["stage1"], checkpoint_dir, ssim_cfg,
                     keep_last)
        ckpt = Checkpoint(net.gin.state_dict(), None, None, "stage1", cfg.stage1_epochs, cfg.echo())
    if "joint" in stages and start["joint"] <= cfg.joint_epochs:
        ckpt, log = train_joint(net.gin, net.iin, dataset, cfg, log, start["joint"], opt_state["joint"],
                                checkpoint_dir, ssim_cfg, keep_last)
    net.eval()
    return net, ckpt, log
