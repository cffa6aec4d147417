"""On-disk datasets: an ``images/`` directory of PNG files and ``annotations.jsonl``.

Each annotation line::

    {"image": "images/000000.png", "width": 256, "height": 256,
     "instances": [{"polygon": [x0, y0, ..., x15, y15], "box": [cx, cy, w, h],
                    "transcript": "abc", "ignore": false}]}

Coordinates are normalized by the image width/height.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .sample import SpottingSample, TextInstance

ANNOTATIONS = "annotations.jsonl"
IMAGE_DIR = "images"


def _round(values, digits: int = 6) -> list[float]:
    return [round(float(v), digits) for v in values]


def sample_record(sample: SpottingSample, image_name: str) -> dict:
    h, w = sample.size
    return {
        "image": image_name,
        "width": w,
        "height": h,
        "instances": [
            {
                "polygon": _round(inst.polygon.reshape(-1)),
                "box": _round(inst.box),
                "transcript": inst.transcript,
                "ignore": bool(inst.ignore),
            }
            for inst in sample.instances
        ],
    }


def save_image(image: np.ndarray, path: Path) -> None:
    Image.fromarray((np.clip(image, 0, 1) * 255).round().astype(np.uint8)).save(path, format="PNG")


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def write_dataset(samples, out_dir: str | Path, start_index: int = 0) -> list[dict]:
    """Write samples as PNGs plus one JSON line each; returns the records."""
    out = Path(out_dir)
    (out / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    records = []
    with open(out / ANNOTATIONS, "w", encoding="utf-8") as fh:
        for i, sample in enumerate(samples, start=start_index):
            name = f"{IMAGE_DIR}/{i:06d}.png"
            save_image(sample.image, out / name)
            rec = sample_record(sample, name)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            records.append(rec)
    return records


def read_annotations(data_dir: str | Path) -> list[dict]:
    path = Path(data_dir) / ANNOTATIONS
    if not path.exists():
        raise FileNotFoundError(f"no {ANNOTATIONS} in {data_dir}")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def record_instances(rec: dict) -> list[TextInstance]:
    return [
        TextInstance(np.asarray(inst["polygon"], dtype=np.float64), inst["transcript"], inst.get("ignore", False))
        for inst in rec["instances"]
    ]


def read_dataset(data_dir: str | Path) -> list[SpottingSample]:
    root = Path(data_dir)
    return [SpottingSample(load_image(root / rec["image"]), record_instances(rec)) for rec in read_annotations(root)]
