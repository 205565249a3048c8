"""Image metrics, pixel-distribution comparison, condition alignment, profiling.

All image metrics take HWC (or HW) arrays in [0, 1].
"""

from __future__ import annotations

import csv
import json
import logging
import resource
import sys
import time
from dataclasses import dataclass, field, asdict
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.signal import convolve2d

from .data import Box, SceneSample, to_display_range
from .errors import DataError, ParameterError, ShapeError
from .features import extract_tokens
from .sampler import SamplerSchedule, ddim_sample
from .training import LatentBatch, TrainState, images_to_tensor, prepare_batch
from .transformer import count_params

log = logging.getLogger(__name__)

PSNR_CAP = 100.0


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _psnr_from_mse(mse: float) -> float:
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    return _psnr_from_mse(float(np.mean((a - b) ** 2)))


def outside_box_psnr(a, b, box: Box) -> float:
    """PSNR over pixels outside ``box`` only."""
    a, b = _pair(a, b)
    keep = ~box.mask(a.shape[0])
    if not keep.any():
        return PSNR_CAP
    return _psnr_from_mse(float(np.mean((a[keep] - b[keep]) ** 2)))


def l1_metric(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = gaussian_window()
    if min(a.shape[:2]) < win.shape[0]:
        raise ShapeError(f"images smaller than the {win.shape[0]}x{win.shape[0]} window")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        filt = lambda z: convolve2d(z, win, mode="valid")
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def pixel_histogram(images: Sequence[np.ndarray]) -> np.ndarray:
    """256-bin histogram of 8-bit quantised pixels pooled over all channels."""
    counts = np.zeros(256, dtype=np.int64)
    for img in images:
        q = np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255).astype(np.int64)
        counts += np.bincount(q.ravel(), minlength=256)
    return counts


def smoothed_distribution(counts: np.ndarray) -> np.ndarray:
    c = counts.astype(np.float64) + 1.0
    return c / c.sum()


def histogram_divergence(generated, reference, out_dir=None, tag: str = "histogram") -> float:
    """Symmetric KL (nats) between Laplace-smoothed pooled pixel histograms.

    With ``out_dir`` the two histograms are also written as ``{tag}.csv`` and
    ``{tag}.png``.
    """
    if len(generated) == 0 or len(reference) == 0:
        raise DataError("histogram divergence needs non-empty image sets")
    hg, hr = pixel_histogram(generated), pixel_histogram(reference)
    p, q = smoothed_distribution(hg), smoothed_distribution(hr)
    div = float(np.sum(p * np.log(p / q)) + np.sum(q * np.log(q / p)))
    if out_dir is not None:
        _write_histograms(Path(out_dir), tag, hg, hr, div)
    return div


def _write_histograms(out: Path, tag: str, hg, hr, div: float) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with (out / f"{tag}.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "generated", "reference"])
        w.writerows(zip(range(256), hg.tolist(), hr.tolist()))
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(hr / hr.sum(), label="ground truth", color="black")
    ax.plot(hg / hg.sum(), label="generated", color="tab:red")
    ax.set_xlabel("pixel value (8-bit)")
    ax.set_ylabel("frequency")
    ax.set_title(f"pixel distribution (sym. KL {div:.4f} nats)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / f"{tag}.png", dpi=120)
    plt.close(fig)


# --------------------------------------------------------------------------
# generation


def _net(state: TrainState, use_ema: bool):
    return state.ema if use_ema else state.net


@torch.no_grad()
def generate_latents(
    state: TrainState,
    batch: LatentBatch,
    schedule: SamplerSchedule | None = None,
    seed: int = 0,
    use_ema: bool = True,
    chunk: int = 32,
) -> torch.Tensor:
    """DDIM target latents for every row of ``batch``; chunk ``i`` uses ``seed + i``."""
    schedule = schedule or SamplerSchedule(T=state.schedule.T)
    net = _net(state, use_ema)
    net.eval()
    out = []
    for k, i in enumerate(range(0, len(batch), chunk)):
        part = batch.select(slice(i, i + chunk))
        c = net.condition(part)
        out.append(ddim_sample(net, part.hint, c, state.schedule, schedule, seed=seed + k))
    return torch.cat(out)


@torch.no_grad()
def decode_to_images(state: TrainState, latents: torch.Tensor) -> list[np.ndarray]:
    imgs = state.codec.decode(latents).clamp(-1, 1)
    return [to_display_range(x) for x in imgs.permute(0, 2, 3, 1).double().numpy()]


def generate_images(state, samples: Sequence[SceneSample], schedule=None, seed: int = 0, use_ema: bool = True):
    batch = prepare_batch(samples, state.codec, state.extractor)
    return decode_to_images(state, generate_latents(state, batch, schedule, seed, use_ema))


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    per_sample: list[dict]
    aggregate: dict
    histogram_divergence: float
    metadata: dict = field(default_factory=dict)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(asdict(self), indent=1))
        keys = list(self.per_sample[0]) if self.per_sample else ["scene_id"]
        with (out / "metrics.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(self.per_sample)


def score_samples(generated, samples: Sequence[SceneSample], out_dir=None, metadata=None) -> MetricsReport:
    if len(generated) != len(samples):
        raise ShapeError(f"{len(generated)} generated images for {len(samples)} scenes")
    rows = []
    for g, s in zip(generated, samples):
        rows.append({
            "scene_id": s.scene_id,
            "psnr": psnr(g, s.target_image),
            "ssim": ssim(g, s.target_image),
            "l1": l1_metric(g, s.target_image),
            "outside_box_psnr": outside_box_psnr(g, s.hint_image, s.box),
        })
    agg = {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim", "l1", "outside_box_psnr")}
    div = histogram_divergence(generated, [s.target_image for s in samples], out_dir=out_dir)
    report = MetricsReport(rows, agg, div, dict(metadata or {}))
    if out_dir is not None:
        report.save(out_dir)
    return report


# --------------------------------------------------------------------------
# condition alignment across views


@dataclass
class ViewGroup:
    hint_image: np.ndarray
    box_viz: np.ndarray
    views: list[np.ndarray]


@dataclass
class AlignmentResult:
    within: float
    between: float
    excluded: int
    similarity: np.ndarray
    labels: np.ndarray


@torch.no_grad()
def view_conditions(state: TrainState, group: ViewGroup, use_ema: bool = True) -> torch.Tensor:
    k = len(group.views)
    src = images_to_tensor(group.views)
    hint = images_to_tensor([group.hint_image])
    box = images_to_tensor([group.box_viz])
    batch = LatentBatch(
        target=state.codec.encode(src),  # unused by the collector
        hint=state.codec.encode(hint).expand(k, -1, -1, -1),
        source=state.codec.encode(src),
        box_tokens=extract_tokens(box, state.extractor).expand(k, -1, -1),
        source_tokens=extract_tokens(src, state.extractor),
        hint_tokens=extract_tokens(hint, state.extractor).expand(k, -1, -1),
    )
    net = _net(state, use_ema)
    net.eval()
    return net.condition(batch)


def cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    n = np.linalg.norm(v, axis=1, keepdims=True)
    u = v / n
    return u @ u.T


def alignment_scores(vectors: np.ndarray, labels: np.ndarray, tol: float = 1e-12) -> AlignmentResult:
    """Mean pairwise cosine within and between label groups; zero vectors dropped."""
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    ok = np.linalg.norm(vectors, axis=1) > tol
    excluded = int((~ok).sum())
    if excluded:
        log.warning("excluded %d zero condition vectors", excluded)
    v, lab = vectors[ok], labels[ok]
    sim = cosine_matrix(v)
    within, between = [], []
    for i, j in combinations(range(len(v)), 2):
        (within if lab[i] == lab[j] else between).append(sim[i, j])
    if not within or not between:
        raise DataError("need at least two groups with two usable views each")
    return AlignmentResult(float(np.mean(within)), float(np.mean(between)), excluded, sim, lab)


def cross_view_alignment(state: TrainState, groups: Sequence[ViewGroup], use_ema: bool = True,
                         plot_path=None) -> AlignmentResult:
    if len(groups) < 2 or any(len(g.views) < 2 for g in groups):
        raise ParameterError("need >= 2 groups with >= 2 views each")
    vecs, labels = [], []
    for gi, g in enumerate(groups):
        c = view_conditions(state, g, use_ema).double().numpy()
        vecs.append(c)
        labels.extend([gi] * len(c))
    result = alignment_scores(np.concatenate(vecs), np.array(labels))
    if plot_path is not None:
        plot_similarity(result, plot_path)
    return result


def plot_similarity(result: AlignmentResult, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(result.similarity, vmin=-1, vmax=1, cmap="viridis")
    ax.set_title(f"condition cosine: within {result.within:.3f} / between {result.between:.3f}")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def groups_from_samples(samples: Sequence[SceneSample]) -> list[ViewGroup]:
    return [ViewGroup(s.hint_image, s.box_viz, list(s.views)) for s in samples if len(s.views) >= 2]


# --------------------------------------------------------------------------
# profiling


def peak_memory_mb() -> float | None:
    if torch.cuda.is_available():
        return torch.cuda.max_memory_allocated() / 2**20
    try:
        rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    except (AttributeError, ValueError):
        return None
    # ru_maxrss is KiB on Linux, bytes on macOS
    return rss / 2**20 if sys.platform == "darwin" else rss / 2**10


@torch.no_grad()
def profile_run(state: TrainState, n: int = 10, sample: SceneSample | None = None,
                steps: int = 50, seed: int = 0) -> dict:
    """Time ``n`` single-image sampler runs (batch 1) and one forward pair."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    if sample is None:
        from .data import generate_scene, SynthParams

        sample = generate_scene(seed, SynthParams(image_size=state.config.codec.image_size,
                                                  downsample_factor=state.config.codec.factor))
    batch = prepare_batch([sample], state.codec, state.extractor)
    schedule = SamplerSchedule(T=state.schedule.T, ddim_steps=steps)
    net = state.ema
    net.eval()
    c = net.condition(batch)
    timings = []
    for i in range(n):
        t0 = time.perf_counter()
        ddim_sample(net, batch.hint, c, state.schedule, schedule, seed=seed + i)
        timings.append(time.perf_counter() - t0)

    y_cat = torch.cat([batch.hint, batch.target], dim=1)
    tt = torch.full((1,), state.schedule.T, dtype=torch.long)
    pair = []
    for _ in range(max(3, n)):
        t0 = time.perf_counter()
        net.forward_full(y_cat, tt, c)
        net.forward_full(y_cat, tt, torch.zeros_like(c))
        pair.append(time.perf_counter() - t0)

    mem = peak_memory_mb()
    return {
        "param_count": count_params(state.config.model)["total"],
        "runs": n,
        "ddim_steps": steps,
        "timings_s": timings,
        "mean_s": float(np.mean(timings)),
        "std_s": float(np.std(timings)),
        "forward_pair_s": float(np.median(pair)),
        "peak_memory_mb": mem if mem is not None else "unavailable",
        "memory_kind": "cuda_allocated" if torch.cuda.is_available() else "process_peak_rss",
    }
