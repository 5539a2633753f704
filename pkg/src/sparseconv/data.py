"""KITTI-format depth I/O, synthetic scan-line samples and benchmark metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np
from PIL import Image

DEPTH_SCALE = 256.0
MAX_DEPTH = 65535 / DEPTH_SCALE
DEPTH_MODELS = ("planar_ground", "constant", "ramp")


@dataclass
class DepthMap:
    """Metric depth in metres; 0 marks an unobserved pixel."""

    depth: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got shape {self.depth.shape}")
        if np.any(self.depth < 0) or not np.all(np.isfinite(self.depth)):
            raise ValueError("depth must be finite and non-negative")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return (self.depth > 0).astype(np.float64)

    @property
    def density(self) -> float:
        return float(self.mask.mean())


@dataclass
class MetricsReport:
    rmse_mm: float
    mae_mm: float
    irmse_per_km: float
    imae_per_km: float
    evaluated_pixels: int

    def as_row(self) -> List[str]:
        return [f"{self.rmse_mm:.4f}", f"{self.mae_mm:.4f}", f"{self.irmse_per_km:.4f}",
                f"{self.imae_per_km:.4f}", str(self.evaluated_pixels)]


# ---------------------------------------------------------------------------
# 16-bit PNG depth files
# ---------------------------------------------------------------------------

def encode_depth(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth < 0) or np.any(depth > MAX_DEPTH) or not np.all(np.isfinite(depth)):
        raise ValueError(f"depth outside the representable range [0, {MAX_DEPTH}] m")
    return np.rint(depth * DEPTH_SCALE).astype(np.uint16)


def write_depth_png(depth_map, path) -> None:
    """Store depth as uint16 metres*256, with 0 for unobserved pixels."""
    depth = depth_map.depth if isinstance(depth_map, DepthMap) else depth_map
    Image.fromarray(encode_depth(depth)).save(path, format="PNG")


def read_depth_png(path) -> DepthMap:
    with Image.open(path) as img:
        if img.mode not in ("I;16", "I;16B", "I"):
            raise ValueError(f"{path}: expected a single-channel 16-bit PNG, got mode {img.mode}")
        raw = np.array(img)
    if raw.ndim != 2:
        raise ValueError(f"{path}: expected a single channel")
    if raw.dtype != np.uint16:
        if raw.min() < 0 or raw.max() > 65535:
            raise ValueError(f"{path}: values outside the 16-bit range")
        raw = raw.astype(np.uint16)
    return DepthMap(raw.astype(np.float64) / DEPTH_SCALE)


def write_mask_png(mask: np.ndarray, path) -> None:
    """8-bit single-channel mask image, 255 = valid."""
    m = np.asarray(mask).squeeze()
    Image.fromarray((m > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def write_image_png(image: np.ndarray, path) -> None:
    """Write a (3, H, W) image in [0, 1] as 8-bit RGB."""
    rgb = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")


def read_image_png(path) -> np.ndarray:
    """Read an RGB image as (3, H, W) floats in [0, 1]."""
    with Image.open(path) as img:
        rgb = np.array(img.convert("RGB"), dtype=np.float64)
    return rgb.transpose(2, 0, 1) / 255.0


# ---------------------------------------------------------------------------
# Synthetic scan-line data
# ---------------------------------------------------------------------------

def _quantize(depth: np.ndarray) -> np.ndarray:
    # keep synthetic depth on the 1/256 m grid so files round-trip exactly
    return np.rint(depth * DEPTH_SCALE) / DEPTH_SCALE


def analytic_depth(height: int, width: int, depth_model: str,
                   rng: np.random.Generator) -> np.ndarray:
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    if depth_model == "constant":
        depth = np.full((height, width), rng.uniform(8.0, 30.0))
    elif depth_model == "ramp":
        near, far = rng.uniform(4.0, 8.0), rng.uniform(25.0, 40.0)
        depth = near + (far - near) * cols / max(width - 1, 1) + 0.0 * rows
    elif depth_model == "planar_ground":
        # ground plane seen from a camera whose horizon sits above the image
        horizon = -0.25 * height + rng.uniform(-0.05, 0.05) * (cols - width / 2.0)
        near = rng.uniform(4.5, 5.5)
        depth = near * (height - 1 - horizon) / (rows - horizon)
    else:
        raise ValueError(f"unknown depth model {depth_model!r}; pick one of {DEPTH_MODELS}")
    return _quantize(np.clip(depth, 1.0, 80.0))


def shade_depth(depth: np.ndarray) -> np.ndarray:
    """Lambert-shaded grayscale rendering of a dense depth map, as (3, H, W)."""
    dz_dv, dz_du = np.gradient(depth)
    normals = np.stack([-dz_du, -dz_dv, np.ones_like(depth)])
    normals /= np.linalg.norm(normals, axis=0, keepdims=True)
    light = np.array([0.3, -0.5, 0.8])
    light /= np.linalg.norm(light)
    shade = 0.15 + 0.85 * np.clip(np.tensordot(light, normals, axes=1), 0.0, 1.0)
    shade *= 1.0 / (1.0 + 0.02 * depth)
    gray = np.rint(np.clip(shade, 0.0, 1.0) * 255) / 255.0
    return np.repeat(gray[None], 3, axis=0)


def synth_scanlines(height: int, width: int, n_lines: int, dropout: float,
                    depth_model: str = "planar_ground", seed: int = 0
                    ) -> Tuple[DepthMap, DepthMap]:
    """Sparse LiDAR-like depth (equally spaced rows with dropout) and dense truth."""
    if not 0 <= n_lines <= height:
        raise ValueError("n_lines must lie in [0, height]")
    if not 0 <= dropout < 1:
        raise ValueError("dropout must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    gt = analytic_depth(height, width, depth_model, rng)
    keep = np.zeros((height, width), dtype=bool)
    if n_lines:
        spacing = height / n_lines
        rows = np.floor(spacing * (np.arange(n_lines) + 0.5)).astype(int)
        keep[rows] = rng.random((n_lines, width)) >= dropout
    return DepthMap(np.where(keep, gt, 0.0)), DepthMap(gt)


KITTI_LIKE = {"n_lines": 5, "dropout": 0.36}


@dataclass
class Sample:
    depth: np.ndarray      # (1, H, W) metres, 0 = missing
    mask: np.ndarray       # (1, H, W) binary
    image: np.ndarray      # (3, H, W) in [0, 1]
    gt: np.ndarray         # (1, H, W) metres
    gt_mask: np.ndarray    # (1, H, W) binary


def make_sample(sparse: DepthMap, gt: DepthMap, image: Optional[np.ndarray] = None) -> Sample:
    if image is None:
        image = shade_depth(gt.depth)
    return Sample(sparse.depth[None], sparse.mask[None], np.asarray(image, dtype=np.float64),
                  gt.depth[None], gt.mask[None])


def synth_dataset(n: int, height: int, width: int, n_lines: int = 5, dropout: float = 0.36,
                  depth_model: str = "planar_ground", seed: int = 0) -> List[Sample]:
    return [make_sample(*synth_scanlines(height, width, n_lines, dropout, depth_model,
                                         seed=seed * 100003 + i))
            for i in range(n)]


# ---------------------------------------------------------------------------
# Manifests and KITTI folders
# ---------------------------------------------------------------------------

MANIFEST_COLUMNS = ("depth", "image", "gt")


def write_manifest(rows: List[Tuple[str, str, str]], path) -> None:
    """Tab-separated index with a header; paths are relative to the manifest."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)


def read_manifest(path) -> List[Tuple[Path, Path, Path]]:
    base = Path(path).parent
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: manifest header must be depth, image, gt")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            rows.append(tuple(base / r for r in row))
    return rows


def load_sample(depth_path, image_path, gt_path) -> Sample:
    return make_sample(read_depth_png(depth_path), read_depth_png(gt_path),
                       read_image_png(image_path))


def load_manifest(path) -> List[Sample]:
    return [load_sample(*row) for row in read_manifest(path)]


def find_kitti_pairs(root) -> Iterator[Tuple[Path, Path, Optional[Path]]]:
    """Yield (velodyne_raw, groundtruth, rgb-or-None) paths from a KITTI tree.

    Follows the depth-completion layout
    ``<drive>/proj_depth/{velodyne_raw,groundtruth}/image_0X/<frame>.png``
    with RGB frames under ``<drive>/image_0X/data/<frame>.png`` when present.
    """
    root = Path(root)
    for raw in sorted(root.rglob("proj_depth/velodyne_raw/image_0*/*.png")):
        cam = raw.parent.name
        drive = raw.parents[3]
        gt = drive / "proj_depth" / "groundtruth" / cam / raw.name
        if not gt.exists():
            continue
        rgb = drive / cam / "data" / raw.name
        yield raw, gt, rgb if rgb.exists() else None


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def evaluate(pred, gt) -> MetricsReport:
    """RMSE/MAE in millimetres and iRMSE/iMAE in 1/km over observed ground truth."""
    p = pred.depth if isinstance(pred, DepthMap) else np.asarray(pred, dtype=np.float64)
    g = gt.depth if isinstance(gt, DepthMap) else np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    valid = g > 0
    n = int(valid.sum())
    if n == 0:
        raise ValueError("ground truth has no observed pixels")
    pv, gv = p[valid], g[valid]
    if np.any(pv <= 0):
        raise ValueError("prediction is zero at an evaluated pixel; inverse depth undefined")
    err_mm = pv * 1000.0 - gv * 1000.0
    inv_err = 1000.0 / pv - 1000.0 / gv
    return MetricsReport(
        rmse_mm=float(np.sqrt(np.mean(err_mm ** 2))),
        mae_mm=float(np.mean(np.abs(err_mm))),
        irmse_per_km=float(np.sqrt(np.mean(inv_err ** 2))),
        imae_per_km=float(np.mean(np.abs(inv_err))),
        evaluated_pixels=n,
    )
