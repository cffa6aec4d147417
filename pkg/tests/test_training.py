import json

import numpy as np
import pytest
import torch

from textspotter import training
from textspotter.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from textspotter.config import load_config
from textspotter.data.synth import generate_sample, sample_rng
from textspotter.training import (
    NonFiniteLossError,
    build_model,
    collate,
    evaluate,
    fit,
    predict,
    step_rng,
    train_step,
)

TINY = [
    "model.dim=16", "model.heads=2", "model.points=2", "model.ffn_dim=32",
    "model.encoder_layers=1", "model.decoder_layers=2", "model.num_queries=8",
    "model.max_len=6", "model.backbone_channels=[8, 8, 16, 16]", "model.stem_channels=8",
    "data.image_size=[64, 64]", "data.max_instances=2", "data.max_word_len=4",
    "data.font_size=[12, 16]", "data.test_short=0", "train.batch_size=2", "train.log_every=0",
]


def tiny_config(*extra):
    return load_config(None, TINY + list(extra))


def tiny_samples(config, n=4, seed=5):
    return [generate_sample(sample_rng(seed, i), config.data) for i in range(n)]


def test_collate_pads_to_canvas_and_rescales():
    cfg = tiny_config("data.image_size=[70, 50]")
    samples = tiny_samples(cfg, 2)
    batch = collate(samples, build_model(cfg).charset, cfg.model.max_len)
    assert batch.canvas == (128, 64)
    assert torch.all(batch.images[:, :, 70:, :] == 0)
    inst = samples[0].instances[0]
    np.testing.assert_allclose(batch.targets[0].polygons[0].numpy(), inst.polygon * [50 / 64, 70 / 128], atol=1e-6)


def test_total_is_sum_of_terms_and_step_is_deterministic():
    cfg = tiny_config()
    batch = collate(tiny_samples(cfg, 2), build_model(cfg).charset, cfg.model.max_len)
    runs = []
    for _ in range(2):
        model = build_model(cfg)
        b = train_step(model, None, batch, cfg, step_rng(0, 0), update=False)
        runs.append(b.as_floats())
        assert float(b.total.detach()) == pytest.approx(sum(float(v.detach()) for v in b.terms.values()), rel=1e-6)
        assert any(k.startswith("dn") for k in b.terms)
        assert any(k.startswith("enc/") for k in b.terms)
    assert runs[0] == runs[1]


def test_non_finite_loss_names_component(monkeypatch):
    cfg = tiny_config()
    real = training.spotting_loss

    def poisoned(*args, **kwargs):
        out = real(*args, **kwargs)
        out.terms["layer1/polygon"] = torch.tensor(float("nan"))
        return out

    monkeypatch.setattr(training, "spotting_loss", poisoned)
    model = build_model(cfg)
    opt, _ = training.build_optimizer(model, cfg)
    before = [p.detach().clone() for p in model.parameters()]
    batch = collate(tiny_samples(cfg, 2), model.charset, cfg.model.max_len)
    with pytest.raises(NonFiniteLossError, match="layer1/polygon") as info:
        train_step(model, opt, batch, cfg, step_rng(0, 0))
    assert info.value.component == "layer1/polygon"
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_zero_iterations_writes_loadable_checkpoint(tmp_path):
    cfg = tiny_config("train.iterations=0")
    res = fit(cfg, tiny_samples(cfg, 2), tmp_path)
    assert res.history == []
    assert (tmp_path / "metrics.jsonl").read_text() == ""
    model, stored, meta = load_checkpoint(tmp_path / "last.npz", cfg)
    assert stored == cfg and meta == {"iteration": 0}
    for a, b in zip(model.state_dict().values(), res.model.state_dict().values()):
        assert torch.equal(a, b)


def test_checkpoint_round_trip_gives_identical_metrics(tmp_path):
    cfg = tiny_config("train.iterations=3")
    samples = tiny_samples(cfg, 2)
    res = fit(cfg, samples, tmp_path)
    model, _, _ = load_checkpoint(res.checkpoints["last"])
    cfg_eval = tiny_config("train.score_threshold=0.0")
    r1, p1 = evaluate(res.model, samples, cfg_eval)
    r2, p2 = evaluate(model, samples, cfg_eval)
    assert r1.to_dict() == r2.to_dict()
    for a, b in zip(p1, p2):
        assert [q["transcript"] for q in a] == [q["transcript"] for q in b]
        assert all(np.array_equal(x["polygon"], y["polygon"]) and x["score"] == y["score"] for x, y in zip(a, b))


def test_mismatched_checkpoint_is_refused(tmp_path):
    cfg = tiny_config()
    path = save_checkpoint(tmp_path / "m.npz", build_model(cfg), cfg)
    with pytest.raises(CheckpointError, match=r"model\.num_queries: checkpoint=8 expected=9"):
        load_checkpoint(path, tiny_config("model.num_queries=9"))
    (tmp_path / "junk.npz").write_bytes(b"not an archive")
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "junk.npz")


def test_metrics_log_and_lr_schedule(tmp_path):
    cfg = tiny_config("train.iterations=4", "train.milestones=[2]", "train.eval_every=2")
    res = fit(cfg, tiny_samples(cfg, 2), tmp_path)
    rows = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in rows] == [0, 1, 2, 3]
    assert [r["lr"] for r in rows] == pytest.approx([1e-4, 1e-4, 1e-5, 1e-5])
    assert all(r["grad_norm"] > 0 and r["total"] > 0 for r in rows)
    assert "eval_e2e_hmean" in rows[1] and "eval_e2e_hmean" not in rows[0]
    assert (tmp_path / "best.npz").exists() and res.best_hmean is not None


def test_fit_is_deterministic():
    cfg = tiny_config("train.iterations=5", "data.augment=true")
    samples = tiny_samples(cfg, 3)
    h1 = fit(cfg, samples).history
    h2 = fit(cfg, samples).history
    assert h1 == h2
    assert fit(tiny_config("train.iterations=5", "data.augment=true", "train.seed=1"), samples).history != h1


def test_blank_image_inference():
    cfg = tiny_config()
    model = build_model(cfg)
    preds = predict(model, np.zeros((64, 64, 3), np.float32), cfg, score_threshold=0.0)
    assert len(preds) == cfg.model.num_queries
    assert predict(model, np.zeros((64, 64, 3), np.float32), cfg, score_threshold=1.01) == []
    for p in preds:
        assert p["polygon"].shape == (16, 2) and np.isfinite(p["polygon"]).all()


def test_predict_maps_back_to_image_coordinates():
    cfg = tiny_config()
    model = build_model(cfg).eval()
    image = np.random.default_rng(0).uniform(size=(40, 100, 3)).astype(np.float32)
    canvas = collate([training.SpottingSample(image)], model.charset, cfg.model.max_len)
    with torch.no_grad():
        out = model(canvas.images)["layers"][-1]
    q = int(torch.argmax(out["logits"][0]))
    top = predict(model, image, cfg, score_threshold=0.0)[0]
    np.testing.assert_allclose(top["polygon"], out["polygons"][0, q].numpy() * [128 / 100, 64 / 40], rtol=1e-6)


@pytest.mark.slow
def test_short_training_reduces_loss():
    cfg = tiny_config("train.iterations=300", "train.lr=5e-4", "train.milestones=[1000, 2000]")
    hist = fit(cfg, tiny_samples(cfg, 8)).history
    first = np.mean([r["total"] for r in hist[:20]])
    last = np.mean([r["total"] for r in hist[-20:]])
    assert last < 0.6 * first, (first, last)
