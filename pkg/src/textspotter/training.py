"""Training loop, evaluation and inference around :class:`TextSpotter`."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import Config
from .data.augment import augment, eval_resize
from .data.charset import Charset, decode_transcript, encode_transcript
from .data.sample import SpottingSample
from .evaluation import EvalReport, evaluate_predictions, full_lexicon, strong_lexicons
from .losses import LossBreakdown, Targets, spotting_loss
from .model.backbone import PYRAMID_STRIDES
from .model.spotter import TextSpotter

logger = logging.getLogger(__name__)

CANVAS_MULTIPLE = PYRAMID_STRIDES[-1]


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss in {component}: {value}")
        self.component = component


def seed_everything(seed: int, num_threads: int = 1) -> None:
    torch.manual_seed(seed)
    if num_threads > 0:
        torch.set_num_threads(num_threads)


def step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step, stream]))


@dataclass
class Batch:
    images: torch.Tensor  # (B, 3, H, W), H and W multiples of 64
    targets: list[Targets]  # normalized to the padded canvas
    gt_boxes: list[np.ndarray]
    image_sizes: list[tuple[int, int]]

    @property
    def canvas(self) -> tuple[int, int]:
        return tuple(self.images.shape[-2:])


def _round_up(v: int, m: int) -> int:
    return int(math.ceil(v / m) * m)


def collate(samples: Sequence[SpottingSample], charset: Charset, max_len: int) -> Batch:
    """Stack images top-left on a zero canvas and rescale targets to canvas coordinates."""
    hs = [s.size[0] for s in samples]
    ws = [s.size[1] for s in samples]
    H, W = _round_up(max(hs), CANVAS_MULTIPLE), _round_up(max(ws), CANVAS_MULTIPLE)
    images = torch.zeros(len(samples), 3, H, W)
    targets, boxes = [], []
    for i, s in enumerate(samples):
        h, w = s.size
        images[i, :, :h, :w] = torch.from_numpy(np.ascontiguousarray(s.image.transpose(2, 0, 1)))
        scale = np.array([w / W, h / H])
        kept = [inst for inst in s.instances if not inst.ignore]
        polys = np.stack([inst.polygon * scale for inst in kept]) if kept else np.zeros((0, 16, 2))
        bx = np.array([inst.box for inst in kept]).reshape(-1, 4) * np.tile(scale, 2)
        texts = [encode_transcript(inst.transcript, charset, max_len) for inst in kept]
        targets.append(
            Targets(
                torch.tensor(bx, dtype=torch.float32),
                torch.tensor(polys, dtype=torch.float32),
                torch.tensor(texts, dtype=torch.long).reshape(-1, max_len),
            )
        )
        boxes.append(bx)
    return Batch(images, targets, boxes, list(zip(hs, ws)))


def build_model(config: Config) -> TextSpotter:
    seed_everything(config.train.seed, config.train.num_threads)
    return TextSpotter(config.model)


def build_optimizer(model: torch.nn.Module, config: Config):
    t = config.train
    opt = torch.optim.AdamW(model.parameters(), lr=t.lr, weight_decay=t.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(t.milestones), gamma=t.gamma)
    return opt, sched


def train_step(
    model: TextSpotter,
    optimizer: torch.optim.Optimizer | None,
    batch: Batch,
    config: Config,
    rng: np.random.Generator,
    update: bool = True,
) -> LossBreakdown:
    """Forward with denoising groups, loss, and (when ``update``) one clipped optimizer step."""
    model.train()
    outputs = model(batch.images, batch.gt_boxes, config.denoising, rng)
    breakdown = spotting_loss(outputs, batch.targets, config.loss, model.charset.pad_id)
    for name, value in breakdown.terms.items():
        if not torch.isfinite(value):
            raise NonFiniteLossError(name, float(value))
    if update:
        optimizer.zero_grad(set_to_none=True)
        breakdown.total.backward()
        norm = torch.nn.utils.clip_grad_norm_(model.parameters(), config.train.clip_norm)
        breakdown.grad_norm = float(norm)
        optimizer.step()
    return breakdown


def _batches(samples: Sequence[SpottingSample], config: Config, step: int) -> list[SpottingSample]:
    """Deterministic batch for ``step``: epochs are seeded permutations of the sample list."""
    bs = min(config.train.batch_size, len(samples))
    per_epoch = max(len(samples) // bs, 1)
    epoch, k = divmod(step, per_epoch)
    order = step_rng(config.train.seed, epoch, 1).permutation(len(samples))
    chosen = [samples[i] for i in order[k * bs:(k + 1) * bs]]
    if config.data.augment:
        rng = step_rng(config.train.seed, step, 2)
        chosen = [augment(s, rng, config.data) for s in chosen]
    return chosen


@torch.no_grad()
def predict(
    model: TextSpotter,
    image: np.ndarray,
    config: Config,
    score_threshold: float | None = None,
) -> list[dict]:
    """Text instances of one ``(H, W, 3)`` image with polygons normalized to that image."""
    model.eval()
    thr = config.train.score_threshold if score_threshold is None else score_threshold
    sample = SpottingSample(np.asarray(image, dtype=np.float32))
    if config.data.test_short > 0:
        sample = eval_resize(sample, config.data.test_short, config.data.test_max_long)
    batch = collate([sample], model.charset, config.model.max_len)
    out = model(batch.images)["layers"][-1]
    h, w = batch.image_sizes[0]
    H, W = batch.canvas
    scale = torch.tensor([W / w, H / h])
    scores = out["logits"][0].sigmoid()
    chars = out["chars"][0].argmax(-1)
    preds = []
    for q in torch.argsort(scores, descending=True, stable=True).tolist():
        s = float(scores[q])
        if s < thr:
            break
        preds.append(
            {
                "polygon": (out["polygons"][0, q] * scale).double().numpy(),
                "score": s,
                "transcript": decode_transcript(chars[q].tolist(), model.charset),
            }
        )
    return preds


def predictions_record(preds: list[dict], image_name: str | None = None) -> dict:
    rec = {
        "predictions": [
            {
                "polygon": [round(float(v), 6) for v in np.asarray(p["polygon"]).reshape(-1)],
                "score": round(float(p["score"]), 6),
                "transcript": p["transcript"],
            }
            for p in preds
        ]
    }
    if image_name is not None:
        rec["image"] = image_name
    return rec


def evaluate(
    model: TextSpotter,
    samples: Sequence[SpottingSample],
    config: Config,
    extra_lexicons: dict[str, Sequence[str]] | None = None,
    iou_threshold: float = 0.5,
) -> tuple[EvalReport, list[list[dict]]]:
    """Predict every sample and score against its annotations.

    End-to-end results cover lexicon-free, a full lexicon (all dataset words),
    a strong lexicon (each image's own words) and any ``extra_lexicons``.
    """
    preds = [predict(model, s.image, config) for s in samples]
    gts = [s.instances for s in samples]
    lexicons = {}
    if full_lexicon(gts):
        lexicons = {"full": full_lexicon(gts), "strong": strong_lexicons(gts)}
    lexicons.update(extra_lexicons or {})
    return evaluate_predictions(preds, gts, lexicons, iou_threshold), preds


@dataclass
class FitResult:
    model: TextSpotter
    history: list[dict]
    best_hmean: float | None
    checkpoints: dict[str, Path]


def fit(
    config: Config,
    samples: Sequence[SpottingSample],
    out_dir: str | Path | None = None,
    eval_samples: Sequence[SpottingSample] | None = None,
    callback: Callable[[dict], None] | None = None,
) -> FitResult:
    """Train for ``config.train.iterations`` steps.

    With ``out_dir``, writes ``metrics.jsonl`` (one line per step),
    ``last.npz`` and, when periodic evaluation is on, ``best.npz`` keyed on
    lexicon-free end-to-end H-mean.
    """
    if not samples:
        raise ValueError("training needs at least one sample")
    t = config.train
    model = build_model(config)
    opt, sched = build_optimizer(model, config)
    out = Path(out_dir) if out_dir is not None else None
    checkpoints: dict[str, Path] = {}
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w", encoding="utf-8")
    history: list[dict] = []
    best = None
    eval_set = eval_samples if eval_samples is not None else samples
    start = time.perf_counter()
    try:
        for step in range(t.iterations):
            batch = collate(_batches(samples, config, step), model.charset, config.model.max_len)
            lr = opt.param_groups[0]["lr"]
            breakdown = train_step(model, opt, batch, config, step_rng(t.seed, step, 0))
            sched.step()
            row = {"iteration": step, "lr": lr, "grad_norm": breakdown.grad_norm, **breakdown.as_floats()}
            if t.eval_every and ((step + 1) % t.eval_every == 0 or step + 1 == t.iterations):
                report, _ = evaluate(model, eval_set, config)
                h = report.end_to_end["none"].hmean
                row["eval_detection_hmean"] = report.detection.hmean
                row["eval_e2e_hmean"] = h
                if best is None or h > best:
                    best = h
                    if out is not None:
                        checkpoints["best"] = save_checkpoint(
                            out / "best.npz", model, config, {"iteration": step + 1, "e2e_hmean": h}
                        )
            history.append(row)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")
            if t.log_every and step % t.log_every == 0:
                logger.info(
                    "step %d loss %.4f lr %.2e (%.1fs)", step, row["total"], lr, time.perf_counter() - start
                )
            if callback is not None:
                callback(row)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out is not None:
        checkpoints["last"] = save_checkpoint(out / "last.npz", model, config, {"iteration": t.iterations})
    return FitResult(model, history, best, checkpoints)
