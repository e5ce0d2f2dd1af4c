"""Image quality metrics and forgetting reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

IDENTICAL = "identical"


def _check_images(a: np.ndarray, b: np.ndarray, max_val: float):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.min(), b.min()) < 0 or max(a.max(), b.max()) > max_val + 1e-9:
        raise ValueError("image values must lie in [0, max_val]")


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> Optional[float]:
    """Peak signal-to-noise ratio in dB; None for identical images.

    The None sentinel (serialized as the string "identical") stands in
    for +inf so reports stay valid JSON.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_images(a, b, max_val)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return None
    return 10.0 * math.log10(max_val * max_val / mse)


def _gaussian_kernel(win_size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = win_size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 2D correlation, valid region only."""
    win = kernel.size
    v = np.lib.stride_tricks.sliding_window_view(img, win, axis=0) @ kernel
    return np.lib.stride_tricks.sliding_window_view(v, win, axis=1) @ kernel


def ssim(a: np.ndarray, b: np.ndarray, max_val: float = 1.0,
         win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM with a Gaussian window, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[0], a.shape[1]) < win_size:
        raise ValueError("image smaller than the SSIM window")
    kernel = _gaussian_kernel(win_size, sigma)
    c1 = (k1 * max_val) ** 2
    c2 = (k2 * max_val) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx = _filter_valid(x, kernel)
        my = _filter_valid(y, kernel)
        mxx = _filter_valid(x * x, kernel)
        myy = _filter_valid(y * y, kernel)
        mxy = _filter_valid(x * y, kernel)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        scores.append(float(s.mean()))
    return float(np.mean(scores))


def rgb_to_hue(img: np.ndarray) -> np.ndarray:
    """Hue channel in degrees [0, 360) per pixel; gray pixels get hue 0."""
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    mx = img.max(axis=-1)
    mn = img.min(axis=-1)
    delta = mx - mn
    hue = np.zeros_like(mx)
    nz = delta > 1e-12
    rmax = nz & (mx == r)
    gmax = nz & (mx == g) & ~rmax
    bmax = nz & ~rmax & ~gmax
    hue[rmax] = 60.0 * (((g - b)[rmax] / delta[rmax]) % 6.0)
    hue[gmax] = 60.0 * ((b - r)[gmax] / delta[gmax] + 2.0)
    hue[bmax] = 60.0 * ((r - g)[bmax] / delta[bmax] + 4.0)
    return hue


def hue_error(rendered: np.ndarray, reference: np.ndarray,
              mask: Optional[np.ndarray] = None) -> float:
    """Mean circular hue difference in degrees over masked pixels."""
    hr = rgb_to_hue(rendered)
    hf = rgb_to_hue(reference)
    diff = np.abs(hr - hf)
    diff = np.minimum(diff, 360.0 - diff)
    if mask is not None:
        if not mask.any():
            raise ValueError("empty mask for hue comparison")
        diff = diff[mask]
    return float(diff.mean())


# ---------------------------------------------------------------------------
# forgetting reports


def _fmt(v) -> str:
    if v is None:
        return IDENTICAL
    return f"{v:.3f}"


@dataclass
class MetricRow:
    task_index: int
    split: str
    psnr: Optional[float]
    ssim: float
    perceptual: Optional[float] = None
    n_images: int = 0


@dataclass
class MetricReport:
    """Per-task, per-split metrics of one checkpoint, plus aggregates.

    Aggregate means treat the identical-image PSNR sentinel as absent
    (rows with the sentinel are skipped in the PSNR mean; SSIM means
    still include them).
    """

    task_index_at_evaluation: int
    perceptual_name: str = "gradssim"
    rows: list = field(default_factory=list)

    def add(self, row: MetricRow):
        self.rows.append(row)

    def _mean(self, values):
        vals = [v for v in values if v is not None]
        return float(np.mean(vals)) if vals else None

    def task_mean(self, task_index: int, metric: str = "psnr"):
        return self._mean([getattr(r, metric) for r in self.rows if r.task_index == task_index])

    def split_mean(self, split: str, metric: str = "psnr"):
        return self._mean([getattr(r, metric) for r in self.rows if r.split == split])

    def overall_mean(self, metric: str = "psnr"):
        return self._mean([getattr(r, metric) for r in self.rows])

    def past_task_mean(self, metric: str = "psnr"):
        """Mean over rows of every task except the evaluation task itself."""
        vals = [getattr(r, metric) for r in self.rows
                if r.task_index != self.task_index_at_evaluation]
        return self._mean(vals)

    @property
    def task_indices(self):
        return sorted({r.task_index for r in self.rows})

    def to_json_dict(self) -> dict:
        return {
            "task_index_at_evaluation": self.task_index_at_evaluation,
            "perceptual_name": self.perceptual_name,
            "rows": [
                {
                    "task_index": r.task_index, "split": r.split,
                    "psnr": IDENTICAL if r.psnr is None else r.psnr,
                    "ssim": r.ssim, "perceptual": r.perceptual,
                    "n_images": r.n_images,
                }
                for r in self.rows
            ],
            "means": {
                "overall_psnr": self.overall_mean("psnr"),
                "overall_ssim": self.overall_mean("ssim"),
                "past_task_psnr": self.past_task_mean("psnr"),
                "past_task_ssim": self.past_task_mean("ssim"),
                "novel_view_psnr": self.split_mean("eval_novel_view", "psnr"),
                "novel_pose_psnr": self.split_mean("eval_novel_pose", "psnr"),
            },
        }

    @staticmethod
    def from_json_dict(d: dict) -> "MetricReport":
        rep = MetricReport(task_index_at_evaluation=d["task_index_at_evaluation"],
                           perceptual_name=d.get("perceptual_name", "gradssim"))
        for r in d["rows"]:
            p = r["psnr"]
            rep.add(MetricRow(task_index=r["task_index"], split=r["split"],
                              psnr=None if p == IDENTICAL else float(p),
                              ssim=float(r["ssim"]), perceptual=r.get("perceptual"),
                              n_images=r.get("n_images", 0)))
        return rep

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=1, sort_keys=True)

    def to_text(self) -> str:
        """Aligned table with novel-view / novel-pose column groups."""
        tasks = self.task_indices
        lines = []
        head = f"{'task':>6} | {'novel view':^24} | {'novel pose':^24}"
        sub = f"{'':>6} | {'PSNR':>10} {'SSIM':>8} | {'PSNR':>10} {'SSIM':>8}"
        lines += [head, sub, "-" * len(sub)]
        def cell(task, split):
            ps = [r.psnr for r in self.rows if r.task_index == task and r.split == split]
            ss = [r.ssim for r in self.rows if r.task_index == task and r.split == split]
            if not ss:
                return f"{'-':>10} {'-':>8}"
            p = self._mean(ps)
            return f"{_fmt(p):>10} {np.mean(ss):>8.4f}"
        for t in tasks:
            lines.append(f"{t:>6} | {cell(t, 'eval_novel_view')} | {cell(t, 'eval_novel_pose')}")
        lines.append("-" * len(sub))
        means = self.to_json_dict()["means"]
        lines.append(
            f"{'mean':>6} | {_fmt(means['novel_view_psnr']):>10} "
            f"{self.split_mean('eval_novel_view', 'ssim') or 0.0:>8.4f} | "
            f"{_fmt(means['novel_pose_psnr']):>10} "
            f"{self.split_mean('eval_novel_pose', 'ssim') or 0.0:>8.4f}"
        )
        lines.append(f"perceptual metric: {self.perceptual_name}")
        return "\n".join(lines)


def forgetting_report(render_fn, datasets_per_task: dict, task_index_at_evaluation: int,
                      perceptual=None) -> MetricReport:
    """Evaluate one (final) model over every task's eval splits.

    render_fn(task_index, camera, pose) must render with the final
    weights; datasets_per_task maps task_index -> iterable of records
    with .image, .camera, .pose and .split attributes.
    """
    import torch

    if not datasets_per_task:
        raise ValueError("no eval datasets given")
    name = getattr(perceptual, "name", "gradssim") if perceptual else "none"
    report = MetricReport(task_index_at_evaluation=task_index_at_evaluation,
                          perceptual_name=name)
    for t_idx in sorted(datasets_per_task):
        records = list(datasets_per_task[t_idx])
        if not records:
            raise ValueError(f"task {t_idx} has no eval records")
        by_split = {}
        for rec in records:
            by_split.setdefault(rec.split, []).append(rec)
        for split in sorted(by_split):
            ps, ss, pc = [], [], []
            for rec in by_split[split]:
                img = render_fn(t_idx, rec.camera, rec.pose)
                ps.append(psnr(img, rec.image))
                ss.append(ssim(img, rec.image))
                if perceptual is not None:
                    pc.append(float(perceptual(
                        torch.tensor(img, dtype=torch.float32),
                        torch.tensor(rec.image, dtype=torch.float32),
                    )))
            clean = [p for p in ps if p is not None]
            report.add(MetricRow(
                task_index=t_idx, split=split,
                psnr=float(np.mean(clean)) if clean else None,
                ssim=float(np.mean(ss)),
                perceptual=float(np.mean(pc)) if pc else None,
                n_images=len(by_split[split]),
            ))
    return report
