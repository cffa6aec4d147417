"""Detection and end-to-end spotting metrics.

Inputs are per-image lists. A prediction is a mapping with ``polygon``
(``(K, 2)`` points or a flat list), ``score`` and ``transcript``; a ground
truth is a :class:`~textspotter.data.sample.TextInstance` or a mapping with
``polygon``, ``transcript`` and optionally ``ignore``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import polygon_iou


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalize_text(text: str) -> str:
    return "".join(text.split()).casefold()


def correct_with_lexicon(word: str, lexicon: Sequence[str]) -> str:
    """Nearest lexicon entry by edit distance (ties: lexicographically smallest).

    The raw word is kept when the best distance exceeds half its length, rounded up.
    """
    if not lexicon:
        raise ValueError("lexicon is empty")
    norm = normalize_text(word)
    best = min(lexicon, key=lambda w: (edit_distance(norm, normalize_text(w)), normalize_text(w)))
    if edit_distance(norm, normalize_text(best)) > math.ceil(len(norm) / 2):
        return word
    return best


def hmean(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _get(obj, key, default=None):
    if isinstance(obj, dict):
        return obj.get(key, default)
    return getattr(obj, key, default)


def _points(obj) -> np.ndarray:
    return np.asarray(_get(obj, "polygon"), dtype=np.float64).reshape(-1, 2)


@dataclass
class ImageMatch:
    pairs: list[tuple[int, int, float]]  # (pred, gt, iou) with non-ignored gts
    unmatched_preds: list[int]
    unmatched_gts: list[int]
    ignored_preds: list[int]


def match_image(preds: Sequence, gts: Sequence, iou_threshold: float = 0.5) -> ImageMatch:
    """Greedy one-to-one matching in order of descending score (ties: higher best IoU first).

    Each prediction takes the unmatched ground truth with the highest IoU at or
    above the threshold. Predictions landing on an ignored ground truth are
    dropped from the counts.
    """
    ious = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        pp = _points(p)
        for j, g in enumerate(gts):
            ious[i, j] = polygon_iou(pp, _points(g))
    best = ious.max(axis=1) if len(gts) else np.zeros(len(preds))
    order = sorted(range(len(preds)), key=lambda i: (-float(_get(preds[i], "score", 1.0)), -best[i], i))
    taken = np.zeros(len(gts), dtype=bool)
    pairs, unmatched, ignored = [], [], []
    for i in order:
        cand = np.where(~taken & (ious[i] >= iou_threshold))[0]
        if cand.size == 0:
            unmatched.append(i)
            continue
        j = int(cand[np.argmax(ious[i, cand])])
        taken[j] = True
        if _get(gts[j], "ignore", False):
            ignored.append(i)
        else:
            pairs.append((i, j, float(ious[i, j])))
    missed = [j for j in range(len(gts)) if not taken[j] and not _get(gts[j], "ignore", False)]
    return ImageMatch(pairs, sorted(unmatched), missed, sorted(ignored))


def _counts(matches: Iterable[ImageMatch], preds_all, correct=None):
    tp = n_pred = n_gt = 0
    for k, m in enumerate(matches):
        good = m.pairs if correct is None else [pr for pr in m.pairs if correct(k, pr)]
        tp += len(good)
        n_pred += len(m.pairs) + len(m.unmatched_preds)
        n_gt += len(m.pairs) + len(m.unmatched_gts)
    return tp, n_pred, n_gt


def _prh(tp: int, n_pred: int, n_gt: int) -> tuple[float, float, float]:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gt if n_gt else 0.0
    return p, r, hmean(p, r)


def detection_prh(preds: Sequence[Sequence], gts: Sequence[Sequence], iou_threshold: float = 0.5):
    """Dataset-level detection precision, recall and H-mean."""
    matches = [match_image(p, g, iou_threshold) for p, g in zip(preds, gts, strict=True)]
    return _prh(*_counts(matches, preds))


def _lexicon_for(lexicon, k: int):
    if lexicon is None:
        return None
    if lexicon and isinstance(lexicon[0], (list, tuple)):
        return lexicon[k]
    return lexicon


def e2e_hmean(
    preds: Sequence[Sequence],
    gts: Sequence[Sequence],
    lexicon: Sequence[str] | Sequence[Sequence[str]] | None = None,
    iou_threshold: float = 0.5,
):
    """End-to-end P/R/H: a hit needs IoU at the threshold and the same normalized transcript.

    ``lexicon`` is a single word list for every image or one list per image;
    predicted words are snapped to it before comparison.
    """
    if lexicon is not None and len(lexicon) == 0:
        raise ValueError("lexicon mode needs a non-empty lexicon")
    matches = [match_image(p, g, iou_threshold) for p, g in zip(preds, gts, strict=True)]

    def correct(k, pair):
        i, j, _ = pair
        text = _get(preds[k][i], "transcript", "")
        lex = _lexicon_for(lexicon, k)
        if lex is not None:
            text = correct_with_lexicon(text, lex)
        return normalize_text(text) == normalize_text(_get(gts[k][j], "transcript", ""))

    return _prh(*_counts(matches, preds, correct))


def one_minus_ned(preds: Sequence[Sequence], gts: Sequence[Sequence], iou_threshold: float = 0.5) -> float:
    """1 - mean normalized edit distance over matched pairs; every unmatched prediction
    or ground truth adds a distance of 1."""
    dists = []
    for p, g in zip(preds, gts, strict=True):
        m = match_image(p, g, iou_threshold)
        for i, j, _ in m.pairs:
            a = normalize_text(_get(p[i], "transcript", ""))
            b = normalize_text(_get(g[j], "transcript", ""))
            longest = max(len(a), len(b))
            dists.append(edit_distance(a, b) / longest if longest else 0.0)
        dists.extend([1.0] * (len(m.unmatched_preds) + len(m.unmatched_gts)))
    if not dists:
        return 1.0
    return 1.0 - float(np.mean(dists))


@dataclass
class Scores:
    precision: float
    recall: float
    hmean: float


@dataclass
class EvalReport:
    detection: Scores
    end_to_end: dict[str, Scores]
    one_minus_ned: float
    per_image: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_predictions(
    preds: Sequence[Sequence],
    gts: Sequence[Sequence],
    lexicons: dict[str, Sequence] | None = None,
    iou_threshold: float = 0.5,
) -> EvalReport:
    """All metrics at once. ``lexicons`` maps a mode name (e.g. ``"full"``) to a lexicon."""
    det = Scores(*detection_prh(preds, gts, iou_threshold))
    e2e = {"none": Scores(*e2e_hmean(preds, gts, None, iou_threshold))}
    for name, lex in (lexicons or {}).items():
        e2e[name] = Scores(*e2e_hmean(preds, gts, lex, iou_threshold))
    per_image = []
    for k, (p, g) in enumerate(zip(preds, gts)):
        m = match_image(p, g, iou_threshold)
        per_image.append(
            {
                "index": k,
                "num_predictions": len(p),
                "num_ground_truth": len(g),
                "matches": [
                    {
                        "prediction": i,
                        "ground_truth": j,
                        "iou": round(iou, 6),
                        "predicted": _get(p[i], "transcript", ""),
                        "expected": _get(g[j], "transcript", ""),
                    }
                    for i, j, iou in m.pairs
                ],
                "unmatched_predictions": m.unmatched_preds,
                "missed_ground_truth": m.unmatched_gts,
            }
        )
    return EvalReport(det, e2e, one_minus_ned(preds, gts, iou_threshold), per_image)


def full_lexicon(gts: Sequence[Sequence]) -> list[str]:
    """Every distinct ground-truth word of the dataset, sorted."""
    return sorted({normalize_text(_get(g, "transcript", "")) for img in gts for g in img if _get(g, "transcript")})


def strong_lexicons(gts: Sequence[Sequence]) -> list[list[str]]:
    """Per-image lexicon made of that image's own words."""
    return [sorted({normalize_text(_get(g, "transcript", "")) for g in img}) or [""] for img in gts]


def read_lexicon(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        words = [line.strip() for line in fh if line.strip()]
    if not words:
        raise ValueError(f"lexicon file {path} is empty")
    return words
