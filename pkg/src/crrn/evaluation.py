"""Benchmark harness: metric reports over a manifest, ablations and single-image inference."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .exceptions import ConfigurationError, DimensionError
from .iin import IinOutput
from .image_model import (
    check_network_input,
    clamp,
    load_image,
    nearest_network_resolution,
    resize,
    save_image,
)
from .metrics import DEFAULT_SSIM, MetricReport, MetricRow, SsimConfig, evaluate_pair
from .network import ABLATIONS, ConcurrentNet
from .synthesis import MixtureTriplet, iter_triplets, read_manifest
from .training import Checkpoint, load_checkpoint

logger = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    manifest: str
    checkpoint: str | None = None
    metric: SsimConfig = field(default_factory=SsimConfig)
    ablation: str = "full"
    output: str | None = None
    emit_predictions: bool = False
    oracle: bool = False

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if not Path(self.manifest).exists():
            raise ConfigurationError(f"manifest does not exist: {self.manifest}")
        if not self.oracle:
            if self.checkpoint is None:
                raise ConfigurationError("a checkpoint is required unless the oracle stub is used")
            if not Path(self.checkpoint).is_file():
                raise ConfigurationError(f"checkpoint does not exist: {self.checkpoint}")


def initial_checkpoint(base_channels: int = 16, seed: int = 0) -> Checkpoint:
    """Untrained weights; the zero-initialized residual head makes ``B* = I``."""
    torch.manual_seed(seed)
    net = ConcurrentNet(base_channels)
    return Checkpoint(net.gin.state_dict(), net.iin.state_dict(), None, "joint", 0,
                      {"base_channels": base_channels, "ablation": "full", "seed": seed})


def _to_tensor(img: np.ndarray) -> torch.Tensor:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]


def _to_plane(t: torch.Tensor) -> np.ndarray:
    return t[0].detach().numpy().transpose(1, 2, 0)


def _resize_unclamped(img: np.ndarray, h: int, w: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(img if img.ndim == 2 else img.transpose(2, 0, 1)))
    t = t[None, None] if img.ndim == 2 else t[None]
    t = torch.nn.functional.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return t[0, 0].numpy() if img.ndim == 2 else t[0].numpy().transpose(1, 2, 0)


def _resolve(checkpoint) -> Checkpoint:
    return checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)


def _model(checkpoint: Checkpoint) -> ConcurrentNet:
    if checkpoint.iin is None:
        raise ConfigurationError("checkpoint holds only stage-1 weights; run the joint stage first")
    return checkpoint.build_model()


def run_model(net: ConcurrentNet, mixture: np.ndarray, guidance: bool = True) -> dict:
    """Inference on one image plane; returns numpy background, reflection, residual and gradient."""
    check_network_input(*np.shape(mixture)[:2])
    net.eval()
    with torch.no_grad():
        p = net(_to_tensor(mixture), guidance=guidance)
    return {
        "background": _to_plane(p.background),
        "reflection": _to_plane(p.reflection),
        "residual": _to_plane(p.residual),
        "gradient": p.gradient[0, 0].numpy(),
    }


def ablation_forward(checkpoint, triplet: MixtureTriplet, tag: str) -> IinOutput:
    """Run one triplet through the variant selected by ``tag``.

    ``iin_only`` zeroes the guidance pyramid; ``l1_only`` requires a
    checkpoint that was trained with the L1 term alone.
    """
    if tag not in ABLATIONS:
        raise ValueError(f"unknown ablation {tag!r}; expected one of {ABLATIONS}")
    checkpoint = _resolve(checkpoint)
    trained_as = checkpoint.config.get("ablation", "full")
    if tag == "l1_only" and trained_as != "l1_only":
        raise ConfigurationError(f"the l1_only variant needs an L1-trained checkpoint, this one is {trained_as!r}")
    out = run_model(_model(checkpoint), triplet.mixture, guidance=tag != "iin_only")
    return IinOutput(
        background=torch.from_numpy(out["background"]),
        reflection=torch.from_numpy(out["reflection"]),
        residual=torch.from_numpy(out["residual"]),
    )


def _regional_mask(t: MixtureTriplet) -> np.ndarray:
    """The stored mask, or the whole image when no pixel passed the threshold."""
    if t.mask.any():
        return t.mask
    logger.warning("triplet %s has an empty reflection mask; regional metrics use the whole image", t.id)
    return np.ones_like(t.mask, dtype=bool)


def _mean_row(rows, id: str) -> MetricRow:
    arr = np.array([r.values() for r in rows], dtype=np.float64)
    return MetricRow(id, *(float(v) for v in arr.mean(axis=0)))


def baseline_row(manifest: dict, cfg: SsimConfig = DEFAULT_SSIM) -> MetricRow:
    """Mean metrics of the do-nothing estimate ``B* = I``."""
    rows = [evaluate_pair(t.mixture, t.background, t.mixture, _regional_mask(t), cfg, t.id)
            for t in iter_triplets(manifest)]
    return _mean_row(rows, "baseline")


def evaluate(cfg: EvalConfig, predictor=None) -> MetricReport:
    """Score every manifest triplet and append the do-nothing baseline row.

    ``predictor`` overrides the checkpoint: a callable taking a triplet and
    returning the background estimate.
    """
    manifest = read_manifest(cfg.manifest)
    for e in manifest["entries"]:
        try:
            check_network_input(e["height"], e["width"])
        except DimensionError as exc:
            raise DimensionError(f"manifest entry {e['id']}: {exc}") from None

    if predictor is None:
        if cfg.oracle:
            def predictor(t):
                return {"background": t.background}
        else:
            checkpoint = load_checkpoint(cfg.checkpoint)
            trained_as = checkpoint.config.get("ablation", "full")
            if cfg.ablation == "l1_only" and trained_as != "l1_only":
                raise ConfigurationError(f"ablation l1_only needs an L1-trained checkpoint, got {trained_as!r}")
            net = _model(checkpoint)
            guidance = cfg.ablation != "iin_only"

            def predictor(t):
                return run_model(net, t.mixture, guidance)

    out_dir = Path(cfg.output) if cfg.output else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    report = MetricReport()
    baseline = []
    for t in iter_triplets(manifest):
        pred = predictor(t)
        b_star = pred["background"] if isinstance(pred, dict) else pred
        mask = _regional_mask(t)
        report.rows.append(evaluate_pair(t.mixture, t.background, np.asarray(b_star, dtype=np.float64), mask,
                                         cfg.metric, t.id))
        baseline.append(evaluate_pair(t.mixture, t.background, t.mixture, mask, cfg.metric, t.id))
        if cfg.emit_predictions and out_dir is not None and isinstance(pred, dict):
            pred_dir = out_dir / "predictions"
            pred_dir.mkdir(exist_ok=True)
            for name, img in pred.items():
                if name in ("background", "reflection", "gradient"):
                    save_image(clamp(img), pred_dir / f"{t.id}_{name}.png")
    report.baseline = _mean_row(baseline, "baseline")
    if out_dir is not None:
        (out_dir / "report.csv").write_text(report.to_csv())
        (out_dir / "report.json").write_text(report.aggregate_json() + "\n")
    logger.info("evaluated %d triplets: %s", len(report.rows), report.aggregate)
    return report


def infer(checkpoint, image_path, out_dir, auto_resize: bool = False) -> dict:
    """Write ``background.png``, ``reflection.png`` and ``gradient.png`` for one image."""
    checkpoint = _resolve(checkpoint)
    mixture = load_image(image_path)
    if mixture.shape[2] == 1:
        mixture = np.repeat(mixture, 3, axis=2)
    h, w = mixture.shape[:2]
    try:
        check_network_input(h, w)
        work = mixture
    except DimensionError:
        if not auto_resize:
            raise
        work = resize(mixture, nearest_network_resolution(h, w))
    out = run_model(_model(checkpoint), work)
    if work is not mixture:
        # map back to the caller's size, keeping B* = clamp(I - residual) exact
        out = {k: _resize_unclamped(v, h, w) for k, v in out.items()}
        out["background"] = clamp(mixture - out["residual"])
        out["reflection"] = clamp(out["reflection"])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in ("background", "reflection", "gradient"):
        paths[name] = out_dir / f"{name}.png"
        save_image(clamp(out[name]), paths[name])
    return paths
