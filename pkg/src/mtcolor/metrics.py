"""Desk-scale evaluation: colorfulness, PSNR, SSIM, instance color fidelity,
and the color-leakage probe."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import PALETTE, AnnotatedImage

PSNR_CAP = 100.0
SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class UndefinedMetric(ValueError):
    """Raised when a metric has no scorable inputs (distinct from a 0 score)."""


def colorfulness(img: np.ndarray) -> float:
    """Hasler-Suesstrunk colorfulness over opponent axes rg and yb."""
    rgb = np.asarray(img, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) RGB image")
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    rg = r - g
    yb = 0.5 * (r + g) - b
    sigma = math.sqrt(rg.var() + yb.var())
    mu = math.sqrt(rg.mean() ** 2 + yb.mean() ** 2)
    return sigma + 0.3 * mu


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(255^2 / MSE) in dB, capped at 100 for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * math.log10(255.0 ** 2 / mse), PSNR_CAP)


def _to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 3:
        return np.asarray(img, dtype=np.float64) @ np.array([0.299, 0.587, 0.114])
    return np.asarray(img, dtype=np.float64)


def _window_stats(x: np.ndarray, y: np.ndarray, win: int):
    from numpy.lib.stride_tricks import sliding_window_view
    wx = sliding_window_view(x, (win, win))
    wy = sliding_window_view(y, (win, win))
    mu_x = wx.mean(axis=(-2, -1))
    mu_y = wy.mean(axis=(-2, -1))
    xy = (wx * wy).mean(axis=(-2, -1)) - mu_x * mu_y
    xx = (wx * wx).mean(axis=(-2, -1)) - mu_x * mu_x
    yy = (wy * wy).mean(axis=(-2, -1)) - mu_y * mu_y
    return mu_x, mu_y, xx, yy, xy


def ssim(a: np.ndarray, b: np.ndarray, win: int = SSIM_WINDOW) -> float:
    """Mean SSIM over sliding uniform windows on the luminance channel."""
    x = _to_luma(a)
    y = _to_luma(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < win:
        raise ValueError(f"image smaller than the {win}x{win} SSIM window")
    c1 = (SSIM_K1 * 255.0) ** 2
    c2 = (SSIM_K2 * 255.0) ** 2
    mu_x, mu_y, var_x, var_y, cov = _window_stats(x, y, win)
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


def _named_palette_color(text: str, palette) -> str | None:
    words = [w.strip(".,!?;:()\"'") for w in text.lower().split()]
    for w in words:
        if w in palette:
            return w
    return None


def instance_color_fidelity(img: np.ndarray, ann: AnnotatedImage,
                            palette=None) -> float:
    """Fraction of instances whose mask-region mean RGB is nearest (Euclidean)
    to the palette color their text names. Raises UndefinedMetric when no
    instance names a palette color."""
    palette = PALETTE if palette is None else palette
    img = np.asarray(img, dtype=np.float64)
    names = list(palette)
    anchors = np.array([palette[n] for n in names], dtype=np.float64)
    scores = []
    for inst in ann.instances:
        named = _named_palette_color(inst.text, palette)
        if named is None:
            continue
        region = img[inst.mask.bits.astype(bool)]
        if region.size == 0:
            continue
        mean = region.mean(axis=0)
        nearest = names[int(np.argmin(np.linalg.norm(anchors - mean, axis=1)))]
        scores.append(1.0 if nearest == named else 0.0)
    if not scores:
        raise UndefinedMetric("no instance names a palette color")
    return float(np.mean(scores))


@dataclass
class LeakageReport:
    inside_delta: float
    outside_delta: float
    ratio: float
    swapped_from: str
    swapped_to: str
    target_instance: int


def swap_color_word(text: str, palette=None, to: str | None = None) -> tuple[str, str, str]:
    """Replace the first palette color word in text; returns (new, old, new_word)."""
    palette = PALETTE if palette is None else palette
    current = _named_palette_color(text, palette)
    if current is None:
        raise ValueError(f"no palette color word in {text!r}")
    if to is None:
        names = list(palette)
        to = names[(names.index(current) + 1) % len(names)]
    if to == current:
        raise ValueError("swap target equals the current color")
    out = []
    for word in text.split():
        out.append(to if word.strip(".,!?;:()\"'").lower() == current else word)
    return " ".join(out), current, to


def leakage_probe(model, request, target_instance: int, schedule=None,
                  swap_to: str | None = None, runner=None) -> LeakageReport:
    """Colorize twice with the target instance's color word swapped and
    compare mean |delta| inside the target mask vs outside all masks."""
    from .sampling import ColorizeRequest, colorize
    if not 0 <= target_instance < request.n:
        raise ValueError(f"target_instance {target_instance} out of range")
    runner = runner or (lambda r: colorize(r, model, schedule))
    mask, text = request.instances[target_instance]
    swapped_text, old, new = swap_color_word(text, to=swap_to)
    instances = list(request.instances)
    instances[target_instance] = (mask, swapped_text)
    swapped = ColorizeRequest(gray=request.gray, global_text=request.global_text,
                              instances=instances, sampler=request.sampler)

    base = runner(request).rgb_float
    probe = runner(swapped).rgb_float
    delta = np.abs(probe - base).mean(axis=2)
    inside = mask.bits.astype(bool)
    union = np.zeros_like(inside)
    for m, _ in request.instances:
        union |= m.bits.astype(bool)
    outside = ~union
    inside_delta = float(delta[inside].mean()) if inside.any() else 0.0
    outside_delta = float(delta[outside].mean()) if outside.any() else 0.0
    if inside_delta == 0.0:
        ratio = 0.0 if outside_delta == 0.0 else float("inf")
    else:
        ratio = outside_delta / inside_delta
    return LeakageReport(inside_delta=inside_delta, outside_delta=outside_delta,
                         ratio=ratio, swapped_from=old, swapped_to=new,
                         target_instance=target_instance)


@dataclass
class MetricReport:
    metrics: list[str]
    rows: list[dict]
    summary: dict[str, dict]
    config: dict = field(default_factory=dict)


def build_report(rows, metrics, config=None) -> MetricReport:
    """Aggregate per-image metric rows; None entries mean undefined and are
    excluded from the summary statistics."""
    summary = {}
    for metric in metrics:
        values = [row[metric] for row in rows
                  if row.get(metric) is not None and np.isfinite(row[metric])]
        if values:
            arr = np.asarray(values, dtype=np.float64)
            summary[metric] = {"mean": float(arr.mean()),
                               "std": float(arr.std()),
                               "count": len(values)}
        else:
            summary[metric] = {"mean": None, "std": None, "count": 0}
    for row in rows:
        for metric in metrics:
            value = row.get(metric)
            if value is not None and not np.isfinite(value):
                raise ValueError(f"non-finite {metric} for {row.get('image_id')}")
    return MetricReport(metrics=list(metrics), rows=list(rows), summary=summary,
                        config=dict(config or {}))


def gray_rgb(image_gray01: np.ndarray) -> np.ndarray:
    """Lift a [0,1] luminance grid to an 8-bit grayscale RGB image."""
    g = np.clip(np.round(np.asarray(image_gray01) * 255.0), 0, 255).astype(np.uint8)
    return np.stack([g, g, g], axis=-1)


def evaluate_images(pairs, metrics, ann_by_id=None) -> list[dict]:
    """Per-image metric rows for (image_id, output_rgb8, reference_rgb8)."""
    rows = []
    for image_id, out, ref in pairs:
        row = {"image_id": image_id}
        if "colorfulness" in metrics:
            row["colorfulness"] = colorfulness(out)
        if "psnr" in metrics:
            row["psnr"] = psnr(out, ref)
        if "ssim" in metrics:
            row["ssim"] = ssim(out, ref)
        if "fidelity" in metrics:
            ann = (ann_by_id or {}).get(image_id)
            if ann is None:
                row["fidelity"] = None
            else:
                try:
                    row["fidelity"] = instance_color_fidelity(out, ann)
                except UndefinedMetric:
                    row["fidelity"] = None
        rows.append(row)
    return rows
