"""L1 + Adam training loop, evaluation and single-image super-resolution."""
from __future__ import annotations

import csv
import ctypes
import ctypes.util
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import flops
from .autograd import Tape, backward, record
from .checkpoint import read_checkpoint, save_checkpoint
from .data import PatchSampler, SrPair, upscale
from .metrics import psnr, ssim
from .model import LkformerConfig, LkraConfig, build_model, lkformer_forward, named_parameters
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "loss", "val_psnr")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """mean |pred - target|; the subgradient at a tie is 0."""
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    flops.tally(3 * n)
    out = Tensor._wrap(np.array([np.abs(diff).mean()]))

    def backward_fn(g, needs):
        sign = np.sign(diff) * (g[0] / n)
        return (sign if needs[0] else None, -sign if needs[1] else None)

    return record(out, (pred, target), backward_fn, "l1_loss")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 8
    patch_size: int = 32
    steps: int = 2000
    milestones: tuple[float, ...] = (0.5, 0.75, 0.9)
    seed: int = 0
    checkpoint_interval: int = 0  # 0: only the final checkpoint
    log_interval: int = 100
    val_images: int = 0  # 0: whole validation set

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1 or self.patch_size < 1:
            raise ValueError("batch and patch size must be positive")

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``: halved at each milestone fraction."""
        passed = sum(1 for m in self.milestones if step > m * self.steps)
        return self.lr * 0.5 ** passed


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        state = cls(t=int(arrays["t"][0]))
        for key, arr in arrays.items():
            if key.startswith("m."):
                state.m[key[2:]] = arr.copy()
            elif key.startswith("v."):
                state.v[key[2:]] = arr.copy()
        return state


def adam_step(params: dict, grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig,
              lr: Optional[float] = None) -> None:
    """Bias-corrected Adam update applied in place to every named parameter."""
    lr = cfg.lr if lr is None else lr
    named = list(named_parameters(params))
    for name, _ in named:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}; step {state.t + 1} aborted")
    state.t += 1
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in named:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def to_input(images: np.ndarray) -> Tensor:
    return Tensor(np.asarray(images, dtype=np.float64) / 255.0)


def to_image(out: Tensor) -> np.ndarray:
    return np.rint(np.clip(out.data * 255.0, 0.0, 255.0))


def super_resolve(lr_image: np.ndarray, cfg: LkformerConfig, params: dict) -> np.ndarray:
    """Upscale one 2-D LR image to a 2-D HR image (integers in [0, 255])."""
    x = to_input(np.asarray(lr_image)[None, None])
    return to_image(lkformer_forward(x, cfg, params))[0, 0]


_M_TRIM_THRESHOLD, _M_TOP_PAD, _M_MMAP_THRESHOLD = -1, -2, -3
_allocator_tuned = False


def tune_allocator() -> bool:
    """Keep freed activation buffers on the glibc heap between steps.

    By default glibc hands every multi-megabyte array back to the kernel on
    free, so each training step page-faults its whole working set again.
    Raising the mmap and trim thresholds avoids that (about 2x faster steps on
    the toy model).  A no-op returning False on other C libraries.
    """
    global _allocator_tuned
    if _allocator_tuned:
        return True
    name = ctypes.util.find_library("c")
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError, TypeError):
        return False
    ok = (mallopt(_M_MMAP_THRESHOLD, 32 << 20) == 1
          and mallopt(_M_TRIM_THRESHOLD, 1 << 30) == 1
          and mallopt(_M_TOP_PAD, 64 << 20) == 1)
    _allocator_tuned = ok
    return ok


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("LKF_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class EvalRow:
    name: str
    psnr: float
    ssim: float


def evaluate(pairs: Sequence[SrPair], cfg: Optional[LkformerConfig] = None,
             params: Optional[dict] = None, with_ssim: bool = True) -> list[EvalRow]:
    """Per-image PSNR/SSIM with a ``scale``-pixel border crop.  Without a model
    the bicubic upscale of each LR image is scored."""

    def score(pair: SrPair) -> EvalRow:
        if params is None:
            sr = upscale(pair.lr, pair.scale)
        else:
            sr = super_resolve(pair.lr, cfg, params)
        crop = pair.scale
        s = ssim(sr, pair.hr, crop) if with_ssim else math.nan
        return EvalRow(pair.name, psnr(sr, pair.hr, crop), s)

    workers = _threads()
    if workers == 1 or len(pairs) < 2:
        return [score(p) for p in pairs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(score, pairs))


def mean_psnr(rows: Sequence[EvalRow]) -> float:
    return float(np.mean([r.psnr for r in rows]))


def mean_ssim(rows: Sequence[EvalRow]) -> float:
    return float(np.mean([r.ssim for r in rows]))


@dataclass
class TrainResult:
    params: dict
    log: list[tuple[int, float, float]]
    optimizer: AdamState
    checkpoints: list[Path]


def _grads(params: dict) -> dict[str, np.ndarray]:
    return {name: t.grad for name, t in named_parameters(params) if t.grad is not None}


def train(cfg: TrainConfig, model_cfg: LkformerConfig, train_pairs: Sequence[SrPair],
          val_pairs: Sequence[SrPair] = (), out_dir=None, resume=None) -> TrainResult:
    """Run ``cfg.steps`` Adam steps on L1 loss.

    Batch ``t`` is drawn from ``Rng(seed).derive(t)``, so a run resumed from a
    checkpoint (parameters + optimizer moments) continues exactly like an
    uninterrupted one.  With ``out_dir`` set, writes ``train_log.csv`` and
    ``ckpt_XXXXXX.lkf`` / ``final.lkf``.
    """
    if not train_pairs:
        raise ValueError("training set is empty")
    for pair in train_pairs:
        if pair.scale != model_cfg.scale:
            raise ValueError(f"pair {pair.name} has scale {pair.scale}, model expects {model_cfg.scale}")
    tune_allocator()
    root = Rng(cfg.seed)
    if resume is not None:
        ckpt = read_checkpoint(resume)
        if ckpt.config != model_cfg:
            raise ValueError("resume checkpoint config differs from the requested model config")
        params = ckpt.params
        state = AdamState.from_arrays(ckpt.extra) if ckpt.extra else AdamState()
        start = int(ckpt.metadata.get("step", state.t))
    else:
        params = build_model(model_cfg, root.derive(0))
        state = AdamState()
        start = 0

    sampler = PatchSampler(train_pairs, cfg.patch_size)
    val = list(val_pairs)[: cfg.val_images] if cfg.val_images else list(val_pairs)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_rows: list[tuple[int, float, float]] = []
    written: list[Path] = []
    leaves = [t for _, t in named_parameters(params)]

    def save(step: int, path: Path) -> None:
        save_checkpoint(path, model_cfg, params, metadata={"step": str(step), "seed": str(cfg.seed)},
                        extra=state.to_arrays())
        written.append(path)

    for step in range(start + 1, cfg.steps + 1):
        lr_batch, hr_batch = sampler.sample(root.derive(1, step), cfg.batch_size)
        x, target = to_input(lr_batch), to_input(hr_batch)
        for t in leaves:
            t.requires_grad = True
            t.grad = None
        with Tape():
            loss = l1_loss(lkformer_forward(x, model_cfg, params), target)
        backward(loss)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise FloatingPointError(f"loss became {loss_value} at step {step}")
        adam_step(params, _grads(params), state, cfg, cfg.lr_at(step))

        last = step == cfg.steps
        if step % cfg.log_interval == 0 or last:
            val_psnr = mean_psnr(evaluate(val, model_cfg, params, with_ssim=False)) if val else math.nan
            log_rows.append((step, loss_value, val_psnr))
            log.info("step %d loss %.5f val_psnr %.3f", step, loss_value, val_psnr)
        if out is not None and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
            save(step, out / f"ckpt_{step:06d}.lkf")

    for t in leaves:
        t.requires_grad = False
        t.grad = None
    if out is not None:
        save(cfg.steps, out / "final.lkf")
        write_log(out / "train_log.csv", log_rows)
    return TrainResult(params, log_rows, state, written)


def write_log(path, rows: Sequence[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for step, loss, val_psnr in rows:
            writer.writerow([step, repr(loss), "" if math.isnan(val_psnr) else repr(val_psnr)])


def train_config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]


def ablation_configs(base: Optional[LkformerConfig] = None) -> dict[str, LkformerConfig]:
    """Row structures of the LKRA kernel/residual ablation and the TL/RTB depth grids."""
    base = base or LkformerConfig()
    rows = {
        "local_only": LkraConfig((), True, True),
        "no_local": LkraConfig((11, 21, 31), False, True),
        "no_rdb11": LkraConfig((21, 31), True, True),
        "rdb11_only": LkraConfig((11,), True, True),
        "rdb11_21": LkraConfig((11, 21), True, True),
        "no_residual": LkraConfig((11, 21, 31), True, False),
        "with_rdb41": LkraConfig((11, 21, 31, 41), True, True),
        "default": LkraConfig((11, 21, 31), True, True),
    }
    out = {f"lkra:{name}": base.with_(lkra=lkra) for name, lkra in rows.items()}
    for n in (2, 4, 6, 8):
        out[f"tl:{n}"] = base.with_(tl_count=n)
    for n in (2, 4, 6, 8):
        out[f"rtb:{n}"] = base.with_(rtb_count=n)
    return out
