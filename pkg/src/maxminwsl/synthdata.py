"""
Synthetic two- or three-class "toy histology" images with ground-truth masks.

Every image shares one kind of background (a base colour plus smooth correlated noise).
Labeled images add 1..k elliptical blobs carrying a zero-mean texture whose pattern is the
only class signal: stripes, dots or a checkerboard. Images are quantized to 8 bits so that
the on-disk copy is value-exact.
"""
from concurrent.futures import ThreadPoolExecutor
import json
from pathlib import Path

import numpy as np
import structlog

from .data_types import Dataset, GenConfig, LabeledImage, Split, Texture
from .exceptions import ConfigError, DatasetError
from .utils import read_image, to_uint8, worker_count, write_image

logger = structlog.get_logger(__name__)

MANIFEST = "manifest.jsonl"
BISECTION_STEPS = 60


def generate(cfg: GenConfig, workers: int | None = None) -> Dataset:
    """Generate every split; each image has its own seed, so the result does not depend on `workers`."""
    sizes = cfg.split_sizes()
    jobs = [(split, i) for split in Split for i in range(sizes[split])]
    with ThreadPoolExecutor(max_workers=workers or worker_count()) as executor:
        records = list(executor.map(lambda job: render_record(cfg, *job), jobs))
    logger.info("Generated dataset", **{split.value: n for split, n in sizes.items()})
    return Dataset(records)


def render_record(cfg: GenConfig, split: Split, index: int) -> LabeledImage:
    rng = np.random.default_rng([cfg.seed, list(Split).index(split), index])
    label = 0 if split is Split.BACKGROUND else index % cfg.num_classes
    pixels = background(cfg, rng)
    if split is Split.BACKGROUND:
        mask = np.zeros((cfg.height, cfg.width), dtype=bool)
    else:
        mask = blob_mask(cfg, rng)
        pattern = texture(cfg.textures[label], cfg, rng)
        pixels = pixels + cfg.texture_amplitude * pattern[None] * mask[None]
    if cfg.noise_std > 0:
        pixels = pixels + rng.normal(0.0, cfg.noise_std, size=pixels.shape)
    pixels = to_uint8(pixels) / 255.0
    return LabeledImage(
        name=f"{split.value}_{index:05d}",
        pixels=pixels,
        label=label,
        gt_mask=mask,
        split=split,
    )


def correlated_noise(height: int, width: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """White noise smoothed by a Gaussian of std `scale` pixels, standardized to unit variance."""
    white = rng.standard_normal((height, width))
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.rfftfreq(width)[None, :]
    kernel = np.exp(-2.0 * (np.pi * scale) ** 2 * (fy ** 2 + fx ** 2))
    field = np.fft.irfft2(np.fft.rfft2(white) * kernel, s=(height, width))
    std = field.std()
    return (field - field.mean()) / std if std > 0 else np.zeros_like(field)


def background(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    field = correlated_noise(cfg.height, cfg.width, cfg.background_scale, rng)
    base = np.asarray(cfg.base_color, dtype=np.float64)[:, None, None]
    return base + cfg.background_std * field[None]


def texture(kind: Texture, cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean pattern with values in [-1, 1]."""
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    if kind is Texture.STRIPES:
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        pattern = np.sin(2.0 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / cfg.stripe_period + phase)
        return _standardize(pattern)
    period = cfg.dot_period
    oy, ox = rng.integers(0, period, size=2)
    if kind is Texture.DOTS:
        dy = (yy + oy) % period - period / 2.0
        dx = (xx + ox) % period - period / 2.0
        pattern = (dy ** 2 + dx ** 2 <= cfg.dot_radius ** 2).astype(np.float64)
    else:
        half = max(period // 2, 1)
        pattern = (((yy + oy) // half + (xx + ox) // half) % 2).astype(np.float64)
    return _standardize(pattern)


def _standardize(pattern: np.ndarray) -> np.ndarray:
    pattern = pattern - pattern.mean()
    peak = np.abs(pattern).max()
    return pattern / peak if peak > 0 else pattern


def blob_mask(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Union of 1..k ellipses covering a random fraction of the image.

    A common scale of all axes is found by bisection so the covered fraction lands within
    `fg_tolerance` of a target drawn from `fg_fraction`. Centres are clamped so every
    ellipse stays inside the image; layouts that cannot reach the target are redrawn.
    """
    lo, hi = cfg.fg_fraction
    margin = min(cfg.fg_tolerance, (hi - lo) / 2.0)
    for attempt in range(cfg.max_retries):
        target = rng.uniform(lo + margin, hi - margin) if hi - lo > 2 * margin else (lo + hi) / 2.0
        n_blobs = int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))
        layout = {
            "centers": rng.uniform(0.2, 0.8, size=(n_blobs, 2)) * [cfg.height, cfg.width],
            "major": rng.uniform(0.6, 1.0, size=n_blobs),
            "ratio": rng.uniform(0.5, 1.0, size=n_blobs),
            "angle": rng.uniform(0.0, np.pi, size=n_blobs),
        }
        mask = _fit_scale(cfg, layout, target)
        if mask is not None:
            fraction = mask.mean()
            if hi - lo < cfg.fg_tolerance or lo <= fraction <= hi:
                return mask
        logger.debug("Blob layout rejected", attempt=attempt, target=round(target, 4))
    raise ConfigError(
        f"Could not place {cfg.blob_count} blobs covering {cfg.fg_fraction} of a "
        f"{cfg.height}x{cfg.width} image after {cfg.max_retries} attempts"
    )


def _ellipses(cfg: GenConfig, layout: dict, scale: float) -> np.ndarray | None:
    height, width = cfg.height, cfg.width
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    mask = np.zeros((height, width), dtype=bool)
    for (cy, cx), major, ratio, angle in zip(layout["centers"], layout["major"], layout["ratio"], layout["angle"]):
        a = scale * major
        b = a * ratio
        cos, sin = np.cos(angle), np.sin(angle)
        ex = np.sqrt((a * cos) ** 2 + (b * sin) ** 2)
        ey = np.sqrt((a * sin) ** 2 + (b * cos) ** 2)
        if 2 * ex > width or 2 * ey > height:
            return None
        cx = np.clip(cx, ex, width - ex)
        cy = np.clip(cy, ey, height - ey)
        u = (xx - cx) * cos + (yy - cy) * sin
        v = -(xx - cx) * sin + (yy - cy) * cos
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask


def _fit_scale(cfg: GenConfig, layout: dict, target: float) -> np.ndarray | None:
    lo, hi = 0.0, float(max(cfg.height, cfg.width))
    for _ in range(BISECTION_STEPS):
        scale = 0.5 * (lo + hi)
        mask = _ellipses(cfg, layout, scale) if scale > 0 else None
        if mask is None:
            hi = scale
            continue
        fraction = mask.mean()
        if abs(fraction - target) <= cfg.fg_tolerance:
            return mask
        if fraction < target:
            lo = scale
        else:
            hi = scale
    return None


# === On-disk format ===

def save(dataset: Dataset, root: Path) -> Path:
    """
    Write images (PPM, or PGM for one channel), masks (PGM) and a JSON-lines manifest.

    Returns the manifest path.
    """
    root = Path(root)
    lines = []
    for record in dataset.records:
        suffix = ".ppm" if record.pixels.shape[0] == 3 else ".pgm"
        image_path = Path("images") / f"{record.name}{suffix}"
        mask_path = Path("masks") / f"{record.name}.pgm"
        write_image(root / image_path, to_uint8(record.pixels))
        write_image(root / mask_path, record.gt_mask.astype(np.uint8) * 255)
        lines.append(json.dumps({
            "path": image_path.as_posix(),
            "mask": mask_path.as_posix(),
            "label": int(record.label),
            "split": record.split.value,
        }))
    manifest = root / MANIFEST
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    logger.info("Dataset saved", manifest=str(manifest), records=len(lines))
    return manifest


def manifest_paths(manifest: Path) -> list[Path]:
    """Image and mask files referenced by a manifest, in manifest order."""
    manifest = Path(manifest)
    paths = []
    for line in manifest.read_text().splitlines():
        if line.strip():
            entry = json.loads(line)
            paths.extend([manifest.parent / entry["path"], manifest.parent / entry["mask"]])
    return paths


def load(root: Path) -> Dataset:
    """Read a dataset written by `save`; `root` is the dataset directory or its manifest."""
    root = Path(root)
    manifest = root if root.is_file() else root / MANIFEST
    if not manifest.is_file():
        raise DatasetError(f"No dataset manifest at {manifest}", record=str(manifest))
    base = manifest.parent
    records = []
    for line_no, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{manifest.name}:{line_no}"
        try:
            entry = json.loads(line)
            image_rel, mask_rel = entry["path"], entry["mask"]
            label, split = int(entry["label"]), Split(entry["split"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"Malformed manifest record {where}: {e}", record=where) from e
        pixels = read_image(base / image_rel, record=f"{where} {image_rel}")
        mask = read_image(base / mask_rel, record=f"{where} {mask_rel}")
        if pixels.ndim == 2:
            pixels = pixels[None]
        if mask.ndim != 2 or mask.shape != pixels.shape[1:]:
            raise DatasetError(f"Mask {mask_rel} does not match image {image_rel} ({where})", record=where)
        records.append(LabeledImage(
            name=Path(image_rel).stem,
            pixels=pixels / 255.0,
            label=label,
            gt_mask=mask > 127,
            split=split,
        ))
    logger.info("Dataset loaded", manifest=str(manifest), records=len(records))
    return Dataset(records)
