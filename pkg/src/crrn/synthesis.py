"""Synthetic mixture generation: ``I = clamp(alpha * B + beta * R)``.

Backgrounds and reflections come from two directories of PNGs. Each entry
gets its own seed derived from ``(config seed, index)``, so entries can be
produced in any order and still come out identical.
"""
from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .exceptions import ConfigurationError, DimensionError, IntegrityError, SchemaVersionError
from .image_model import (
    Resolution,
    as_image_plane,
    atomic_write_bytes,
    clamp,
    gradient_magnitude,
    list_pngs,
    load_image,
    luminance,
    resize,
    save_image,
)

logger = logging.getLogger(__name__)

ALPHA_RANGE = (0.8, 1.0)
BETA_RANGE = (0.1, 0.5)
AUGMENTATIONS = ("rotate90", "rotate180", "rotate270", "flip_h", "flip_v")
MANIFEST_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
MASK_DILATION_RADIUS = 2


@dataclass(frozen=True)
class MixWeights:
    alpha: float
    beta: float

    def __post_init__(self):
        if not ALPHA_RANGE[0] <= self.alpha <= ALPHA_RANGE[1]:
            raise ConfigurationError(f"alpha {self.alpha} outside {ALPHA_RANGE}")
        if not BETA_RANGE[0] <= self.beta <= BETA_RANGE[1]:
            raise ConfigurationError(f"beta {self.beta} outside {BETA_RANGE}")


@dataclass
class MixtureTriplet:
    mixture: np.ndarray
    background: np.ndarray
    reflection: np.ndarray
    weights: MixWeights
    background_gradient: np.ndarray
    mask: np.ndarray
    id: str = ""


@dataclass
class SynthesisConfig:
    seed: int = 0
    count: int = 8
    resolutions: list = field(default_factory=lambda: [Resolution(96, 160)])
    blur_sigma_range: tuple = (0.0, 3.0)
    mask_threshold: float = 0.08
    augmentations: tuple = AUGMENTATIONS

    def __post_init__(self):
        self.resolutions = [Resolution.parse(r) for r in self.resolutions]
        self.blur_sigma_range = tuple(float(s) for s in self.blur_sigma_range)
        self.augmentations = tuple(self.augmentations)
        self.validate()

    def validate(self):
        if int(self.count) < 1:
            raise ConfigurationError(f"count must be >= 1, got {self.count}")
        if not self.resolutions:
            raise ConfigurationError("at least one resolution is required")
        lo, hi = self.blur_sigma_range if len(self.blur_sigma_range) == 2 else (None, None)
        if lo is None or lo < 0 or hi < lo:
            raise ConfigurationError(f"blur_sigma_range must be [lo, hi] with 0 <= lo <= hi, got {self.blur_sigma_range}")
        if not 0 < self.mask_threshold < 1:
            raise ConfigurationError(f"mask_threshold must lie in (0, 1), got {self.mask_threshold}")
        unknown = set(self.augmentations) - set(AUGMENTATIONS)
        if unknown:
            raise ConfigurationError(f"unknown augmentations: {sorted(unknown)}")

    def echo(self) -> dict:
        return {
            "seed": int(self.seed),
            "count": int(self.count),
            "resolutions": [str(r) for r in self.resolutions],
            "blur_sigma_range": list(self.blur_sigma_range),
            "mask_threshold": float(self.mask_threshold),
            "augmentations": list(self.augmentations),
        }


def mix(background, reflection, w: MixWeights) -> np.ndarray:
    background = as_image_plane(background)
    reflection = as_image_plane(reflection)
    if background.shape != reflection.shape:
        raise DimensionError(f"background {background.shape} and reflection {reflection.shape} differ")
    return clamp(w.alpha * background + w.beta * reflection)


def sample_weights(rng: np.random.Generator) -> MixWeights:
    alpha = rng.uniform(*ALPHA_RANGE)
    beta = rng.uniform(*BETA_RANGE)
    return MixWeights(float(alpha), float(beta))


def augment(img, op: str) -> np.ndarray:
    """Rotate by a multiple of 90 degrees or flip; ``"none"`` returns a copy."""
    img = np.asarray(img)
    if op == "none":
        out = img
    elif op == "rotate90":
        out = np.rot90(img, 1, axes=(0, 1))
    elif op == "rotate180":
        out = np.rot90(img, 2, axes=(0, 1))
    elif op == "rotate270":
        out = np.rot90(img, 3, axes=(0, 1))
    elif op == "flip_h":
        out = img[:, ::-1]
    elif op == "flip_v":
        out = img[::-1]
    else:
        raise ValueError(f"unknown augmentation {op!r}; expected one of {AUGMENTATIONS}")
    return np.ascontiguousarray(out)


def reflection_blur(reflection, sigma: float) -> np.ndarray:
    """Gaussian blur per channel with mirrored borders; ``sigma == 0`` is the identity."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    reflection = as_image_plane(reflection)
    if sigma == 0:
        return reflection.copy()
    return ndimage.gaussian_filter(reflection, sigma=(sigma, sigma, 0), mode="reflect")


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius ** 2


def region_mask(reflection, w: MixWeights, tau: float) -> np.ndarray:
    """Reflection-dominant pixels: ``beta * luminance(R) >= tau``, dilated by a radius-2 disk."""
    if not 0 < tau < 1:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    seed = w.beta * luminance(reflection) >= tau
    if not seed.any():
        return seed
    return ndimage.binary_dilation(seed, structure=_disk(MASK_DILATION_RADIUS))


def make_triplet(background, reflection, w: MixWeights, tau: float = 0.08, id: str = "") -> MixtureTriplet:
    background = as_image_plane(background)
    reflection = as_image_plane(reflection)
    return MixtureTriplet(
        mixture=mix(background, reflection, w),
        background=background,
        reflection=reflection,
        weights=w,
        background_gradient=gradient_magnitude(background),
        mask=region_mask(reflection, w, tau),
        id=id,
    )


def encode_mask(mask: np.ndarray) -> str:
    return base64.b64encode(np.packbits(mask.astype(bool).ravel()).tobytes()).decode("ascii")


def decode_mask(text: str, height: int, width: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(base64.b64decode(text), dtype=np.uint8))
    if bits.size < height * width:
        raise IntegrityError("mask payload is shorter than its declared size")
    return bits[: height * width].reshape(height, width).astype(bool)


def entry_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _to_three_channels(img: np.ndarray) -> np.ndarray:
    return np.repeat(img, 3, axis=2) if img.shape[2] == 1 else img


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(clamp(img) * 255.0) / 255.0).astype(np.float32)


def synthesize_entry(cfg: SynthesisConfig, index: int, backgrounds: list, reflections: list):
    """Build one triplet (values already on the 8-bit grid) plus its manifest metadata."""
    seed = entry_seed(cfg.seed, index)
    rng = np.random.default_rng(seed)
    bg_path = backgrounds[rng.integers(len(backgrounds))]
    rf_path = reflections[rng.integers(len(reflections))]
    res = cfg.resolutions[rng.integers(len(cfg.resolutions))]
    ops = ("none",) + tuple(cfg.augmentations)
    op = ops[rng.integers(len(ops))]
    lo, hi = cfg.blur_sigma_range
    sigma = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    w = sample_weights(rng)

    # rotations by 90/270 swap axes, so resize to the transposed shape first
    pre = Resolution(res.width, res.height) if op in ("rotate90", "rotate270") else res
    bg = augment(resize(_to_three_channels(load_image(bg_path)), pre), op)
    rf = augment(resize(_to_three_channels(load_image(rf_path)), pre), op)
    rf = reflection_blur(rf, sigma)

    bg, rf = _quantize(bg), _quantize(rf)
    triplet = make_triplet(bg, rf, w, cfg.mask_threshold, id=f"{index:05d}")
    meta = {
        "alpha": w.alpha,
        "beta": w.beta,
        "blur_sigma": sigma,
        "augmentation": op,
        "height": res.height,
        "width": res.width,
        "seed": seed,
        "sources": {"background": bg_path.name, "reflection": rf_path.name},
    }
    return triplet, meta


def generate_dataset(cfg: SynthesisConfig, background_pool, reflection_pool, out) -> dict:
    """Write ``cfg.count`` triplets under ``out`` and return the manifest document."""
    cfg.validate()
    pools = {}
    for name, pool in (("background", background_pool), ("reflection", reflection_pool)):
        pool = Path(pool)
        if not pool.is_dir():
            raise ConfigurationError(f"{name} pool does not exist: {pool}")
        files = list_pngs(pool)
        if not files:
            raise ConfigurationError(f"{name} pool contains no PNG files: {pool}")
        pools[name] = files

    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for index in range(int(cfg.count)):
        triplet, meta = synthesize_entry(cfg, index, pools["background"], pools["reflection"])
        files = {}
        for role, img in (("mixture", triplet.mixture), ("background", triplet.background), ("reflection", triplet.reflection)):
            rel = f"images/{triplet.id}_{role}.png"
            save_image(img, out / rel)
            files[role] = rel
        entries.append({
            "id": triplet.id,
            **files,
            "mask": encode_mask(triplet.mask),
            "alpha": meta["alpha"],
            "beta": meta["beta"],
            "blur_sigma": meta["blur_sigma"],
            "augmentation": meta["augmentation"],
            "height": meta["height"],
            "width": meta["width"],
            "seed": meta["seed"],
        })
        logger.debug("wrote triplet %s (%s)", triplet.id, meta["sources"])

    manifest = {"schema_version": MANIFEST_SCHEMA_VERSION, "config": cfg.echo(), "entries": entries}
    write_manifest(manifest, out / MANIFEST_NAME)
    return manifest


def write_manifest(manifest: dict, path) -> None:
    atomic_write_bytes(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def read_manifest(path, validate: bool = True) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no manifest at {path}")
    try:
        manifest = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"manifest {path} is not valid JSON: {exc}") from exc
    version = manifest.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise SchemaVersionError(f"manifest schema {version} is not supported (expected {MANIFEST_SCHEMA_VERSION})")
    manifest["root"] = str(path.parent)
    if validate:
        for e in manifest["entries"]:
            for role in ("mixture", "background", "reflection"):
                if not (path.parent / e[role]).is_file():
                    raise IntegrityError(f"entry {e['id']} references missing file {e[role]}")
    return manifest


def load_triplet(manifest: dict, entry: dict) -> MixtureTriplet:
    root = Path(manifest["root"])
    images = {role: load_image(root / entry[role]) for role in ("mixture", "background", "reflection")}
    return MixtureTriplet(
        mixture=images["mixture"],
        background=images["background"],
        reflection=images["reflection"],
        weights=MixWeights(entry["alpha"], entry["beta"]),
        background_gradient=gradient_magnitude(images["background"]),
        mask=decode_mask(entry["mask"], entry["height"], entry["width"]),
        id=entry["id"],
    )


def iter_triplets(manifest: dict):
    for entry in manifest["entries"]:
        yield load_triplet(manifest, entry)


def procedural_image(rng: np.random.Generator, height: int = 128, width: int = 192, kind: str = "background") -> np.ndarray:
    """Random scene made of smooth gradients, rectangles, disks and stripes.

    Backgrounds get a textured base with hard-edged shapes; reflections get
    fewer, larger and brighter shapes.
    """
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float32)
    yy /= height
    xx /= width
    base = rng.uniform(0.1, 0.6, size=3).astype(np.float32)
    tilt = rng.uniform(-0.3, 0.3, size=(2, 3)).astype(np.float32)
    img = base + xx[..., None] * tilt[0] + yy[..., None] * tilt[1]
    n_shapes = rng.integers(6, 12) if kind == "background" else rng.integers(2, 5)
    for _ in range(n_shapes):
        color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
        shape = rng.integers(3)
        if shape == 0:
            y0, x0 = rng.uniform(0, 0.8, size=2)
            h, w = rng.uniform(0.1, 0.5, size=2)
            sel = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        elif shape == 1:
            cy, cx = rng.uniform(0, 1, size=2)
            rad = rng.uniform(0.05, 0.3)
            sel = (yy - cy) ** 2 + ((xx - cx) * width / height) ** 2 <= rad ** 2
        else:
            freq = rng.uniform(4, 16)
            angle = rng.uniform(0, np.pi)
            phase = np.cos(angle) * xx + np.sin(angle) * yy
            sel = np.sin(2 * np.pi * freq * phase) > 0.3
            y0, x0 = rng.uniform(0, 0.6, size=2)
            sel &= (yy >= y0) & (yy < y0 + 0.4) & (xx >= x0) & (xx < x0 + 0.4)
        img[sel] = color
    if kind == "reflection":
        img = np.clip(img * rng.uniform(1.0, 1.6), 0, 1)
    return clamp(img).astype(np.float32)


def make_procedural_pool(directory, count: int, seed: int, kind: str = "background",
                         height: int = 128, width: int = 192) -> list:
    """Fill ``directory`` with ``count`` procedural PNGs; returns their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([int(seed), 0 if kind == "background" else 1])
    paths = []
    for i in range(count):
        p = directory / f"{kind}_{i:04d}.png"
        save_image(procedural_image(rng, height, width, kind), p)
        paths.append(p)
    return paths


def config_from_dict(d: dict) -> SynthesisConfig:
    known = {f for f in SynthesisConfig.__dataclass_fields__}
    return SynthesisConfig(**{k: v for k, v in d.items() if k in known})

