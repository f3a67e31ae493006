import json
import math

import numpy as np
import pytest
import torch

from ifom.datagen import SyntheticSpec, synthesize
from ifom.errors import IncompatibleCheckpointError, InvalidInputError
from ifom.models import BackboneConfig, build_bundle, build_extractor, embed, score
from ifom.training import (
    FinetuneConfig,
    PretrainConfig,
    TrainingHistory,
    finetune,
    load_extractor,
    load_pretrain_checkpoint,
    new_pretrain_state,
    pair_permutation,
    pretrain,
    pretrain_state_run,
    pretrain_step,
)
from ifom.transforms import ImageSample

import smoke
from proxies import CountingSample

TINY = BackboneConfig()


@pytest.fixture(scope="module")
def data():
    samples, _ = synthesize([SyntheticSpec("fingerprint", (32, 32), 24, "woodglue-analog", 0.03, 0)])
    return samples


def params_of(*modules):
    return [p.detach().clone() for m in modules for p in m.parameters()]


def same(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def test_config_validation():
    with pytest.raises(InvalidInputError):
        PretrainConfig(batch_size=1)
    with pytest.raises(InvalidInputError):
        PretrainConfig(optimizer="rmsprop")
    with pytest.raises(InvalidInputError):
        PretrainConfig.from_dict({"learning_rate": 1e-3, "lr": 1})
    cfg = PretrainConfig.paper_fingerprint()
    assert (cfg.learning_rate, cfg.weight_decay, cfg.batch_size) == (1e-6, 5e-4, 12)
    assert FinetuneConfig.paper_face().optimizer == "sgd"
    assert PretrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_pair_permutation_is_derangement():
    rng = np.random.default_rng(0)
    for n in range(2, 20):
        p = pair_permutation(n, rng)
        assert sorted(p) == list(range(n)) and not np.any(p == np.arange(n))


def _step_once(seed, lr=1e-3):
    cfg = PretrainConfig(seed=seed, learning_rate=lr)
    st = new_pretrain_state(TINY, cfg)
    x = torch.from_numpy(np.random.default_rng(seed).random((4,) + TINY.input_shape)).float()
    rec = pretrain_step(st, x, x.flip(0), cfg, np.random.default_rng(seed))
    return st, rec


def test_step_deterministic():
    a, ra = _step_once(3)
    b, rb = _step_once(3)
    assert ra == rb
    assert same(params_of(a.bundle.extractor, a.bundle.generator, a.bundle.critic),
                params_of(b.bundle.extractor, b.bundle.generator, b.bundle.critic))


def test_zero_learning_rate_step_is_identity():
    cfg = PretrainConfig(seed=0, learning_rate=0.0)
    st = new_pretrain_state(TINY, cfg)
    before = params_of(st.bundle.extractor, st.bundle.generator, st.bundle.critic)
    x = torch.rand((4,) + TINY.input_shape)
    rec = pretrain_step(st, x, x.flip(0), cfg, np.random.default_rng(0))
    assert same(before, params_of(st.bundle.extractor, st.bundle.generator, st.bundle.critic))
    assert all(math.isfinite(rec[k]) for k in ("L_r", "L_g", "L_t", "total"))


def test_step_rejects_tiny_batch():
    cfg = PretrainConfig()
    st = new_pretrain_state(TINY, cfg)
    x = torch.rand((1,) + TINY.input_shape)
    with pytest.raises(InvalidInputError):
        pretrain_step(st, x, x, cfg, np.random.default_rng(0))


def test_critic_clipped_after_every_step(data):
    cfg = PretrainConfig(seed=1, epochs=1, learning_rate=0.05)
    st = new_pretrain_state(TINY, cfg)
    x = torch.from_numpy(np.stack([s.pixels for s in data[:12]])).float()
    rng = np.random.default_rng(0)
    for _ in range(5):
        pretrain_step(st, x, x.roll(1, 0), cfg, rng)
        assert max(float(p.detach().abs().max()) for p in st.bundle.critic.parameters()) <= 0.01


def test_pretrain_zero_epochs_keeps_init(data):
    ext, hist = pretrain(data, PretrainConfig(epochs=0, seed=5), TINY)
    assert len(hist) == 0
    assert same(params_of(ext), params_of(build_bundle(TINY, 5).extractor))


def test_history_length_and_finite(data):
    _, hist = pretrain(data, PretrainConfig(epochs=2, seed=0, batch_size=12), TINY)
    assert len(hist) == 2 * (len(data) // 12)
    steps = [r["step"] for r in hist.records]
    assert steps == sorted(steps) and len(set(steps)) == len(steps)
    for name in ("L_r", "L_g", "L_t", "total"):
        assert np.all(np.isfinite(hist.values(name)))


def test_history_file_round_trip(tmp_path, data):
    _, hist = pretrain(data, PretrainConfig(epochs=1, seed=0), TINY)
    hist.write(tmp_path / "h.ndjson")
    lines = (tmp_path / "h.ndjson").read_text().splitlines()
    first = json.loads(lines[0])
    assert set(first) == {"phase", "epoch", "step", "loss", "value"}
    assert TrainingHistory.read(tmp_path / "h.ndjson") == hist.records


def test_empty_dataset():
    with pytest.raises(InvalidInputError):
        pretrain([], PretrainConfig(), TINY)


def test_pretrain_deterministic(data):
    a, ha = pretrain(data, PretrainConfig(epochs=1, seed=2), TINY)
    b, hb = pretrain(data, PretrainConfig(epochs=1, seed=2), TINY)
    assert same(params_of(a), params_of(b)) and ha.records == hb.records


def test_resume_equals_uninterrupted(tmp_path, data):
    cfg = PretrainConfig(epochs=3, seed=4)
    full = pretrain_state_run(data, cfg, TINY, out_dir=tmp_path / "full")
    resumed = pretrain_state_run(data, cfg, resume_from=tmp_path / "full" / "pretrain_epoch001.npz")
    for attr in ("extractor", "generator", "critic"):
        assert same(params_of(getattr(full.bundle, attr)), params_of(getattr(resumed.bundle, attr)))
    assert full.history.records == resumed.history.records
    ext, meta = load_extractor(tmp_path / "full" / "pretrain_final.npz")
    assert same(params_of(ext), params_of(full.bundle.extractor)) and meta["epoch"] == 3


def test_resume_rejects_other_seed(tmp_path, data):
    pretrain_state_run(data, PretrainConfig(epochs=1, seed=0), TINY, out_dir=tmp_path)
    with pytest.raises(IncompatibleCheckpointError):
        load_pretrain_checkpoint(tmp_path / "pretrain_final.npz", PretrainConfig(seed=1))


def test_pretrain_is_label_blind(data):
    CountingSample.reads = 0
    proxied = [CountingSample(s) for s in data]
    assert proxied[0].label and CountingSample.reads == 1
    CountingSample.reads = 0
    pretrain(proxied, PretrainConfig(epochs=1, seed=0), TINY)
    assert CountingSample.reads == 0


def test_pretrain_accepts_unlabeled(data):
    unlabeled = [ImageSample(s.pixels, s.modality) for s in data]
    _, hist = pretrain(unlabeled, PretrainConfig(epochs=1, seed=0), TINY)
    assert len(hist) > 0


def test_stability_over_seeds(data):
    x_all = torch.from_numpy(np.stack([s.pixels for s in data])).float()
    for seed in range(5):
        cfg = PretrainConfig(seed=seed)
        st = new_pretrain_state(TINY, cfg)
        rng = np.random.default_rng(seed)
        for _ in range(100):
            idx = torch.from_numpy(rng.choice(len(data), 12, replace=False))
            rec = pretrain_step(st, x_all[idx], x_all[idx].roll(1, 0), cfg, rng)
            assert all(math.isfinite(v) for k, v in rec.items() if k != "step")


def test_reconstruction_smoke_against_golden():
    golden = json.loads(smoke.GOLDEN.read_text())
    out = smoke.run()
    assert out["steps"] == golden["steps"] == 200
    assert out["reduction"] >= golden["min_reduction"]
    assert out["L_r_step0"] == pytest.approx(golden["L_r_step0"], rel=1e-6)


# --- fine-tuning --------------------------------------------------------------------

def test_finetune_zero_epochs_is_fresh_head(data):
    ext = build_extractor(TINY, 0)
    det, hist = finetune(ext, data, FinetuneConfig(epochs=0, seed=7))
    assert len(hist) == 0
    x = np.stack([s.pixels for s in data[:5]])
    z = embed(ext, x).double().numpy()
    w = det.head.weight.detach().double().numpy().reshape(-1)
    expected = 1 / (1 + np.exp(-(z @ w + float(det.head.bias.detach()))))
    np.testing.assert_allclose(score(det, x), expected, atol=1e-6)


def test_finetune_rejects_unlabeled(data):
    items = list(data[:4]) + [ImageSample(data[0].pixels, "fingerprint")]
    with pytest.raises(InvalidInputError):
        finetune(build_extractor(TINY, 0), items, FinetuneConfig(epochs=1))


def test_finetune_deterministic(data):
    ext = build_extractor(TINY, 0)
    a, ha = finetune(ext, data, FinetuneConfig(epochs=1, seed=3))
    b, hb = finetune(ext, data, FinetuneConfig(epochs=1, seed=3))
    assert same(params_of(a), params_of(b)) and ha.records == hb.records


def test_finetune_leaves_extractor_untouched(data):
    ext = build_extractor(TINY, 0)
    before = params_of(ext)
    finetune(ext, data, FinetuneConfig(epochs=1))
    assert same(before, params_of(ext))


def test_finetune_separable_toy_reaches_full_accuracy():
    # bright vs dark images are linearly separable through the pooled embedding
    rng = np.random.default_rng(0)
    items = []
    for i in range(16):
        level = 0.8 if i % 2 else 0.2
        px = np.clip(level + 0.05 * rng.standard_normal(TINY.input_shape), 0, 1)
        items.append(ImageSample(px, "fingerprint", "attack" if i % 2 else "bona_fide"))
    det, _ = finetune(build_extractor(TINY, 0), items, FinetuneConfig(epochs=50, batch_size=8, seed=0))
    s = score(det, np.stack([it.pixels for it in items]))
    pred = s >= 0.5
    truth = np.array([it.label == "attack" for it in items])
    assert np.all(pred == truth)
