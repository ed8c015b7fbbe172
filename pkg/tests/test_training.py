import numpy as np
import pytest

from hazardvlm.data import SynthConfig, build_vocab, synth_generate
from hazardvlm.model import HazardModel, ModelConfig
from hazardvlm.optim import AdamWState, ScheduleConfig, lr_at
from hazardvlm.training import (
    HAZARD_PROMPT,
    BadMagic,
    BadVersion,
    Checkpoint,
    LOG_HEADER,
    StepLog,
    TrainConfig,
    TrainingDiverged,
    Truncated,
    accumulate_gradients,
    apply_checkpoint,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
    write_log,
)

SMALL_MODEL = ModelConfig(
    image_size=16,
    patch_size=4,
    embed_dim=16,
    heads=2,
    encoder_layers=1,
    decoder_layers=1,
    latent_dim=8,
    lora_rank=2,
    max_caption_len=16,
)


def make_dataset(n=24, seed=0, image_size=16, patch_size=4):
    cfg = SynthConfig(image_size=image_size, patch_size=patch_size)
    samples = synth_generate(n, cfg, seed=seed)
    vocab = build_vocab([s.caption for s in samples] + [HAZARD_PROMPT])
    return samples, vocab


def small_model(vocab, seed=0):
    cfg = ModelConfig(
        **{**SMALL_MODEL.__dict__, "vocab_size": len(vocab)}
    )
    return HazardModel(cfg, seed=seed)


def quick_cfg(**overrides):
    base = dict(
        epochs=1,
        grad_accum_steps=2,
        base_lr=1e-3,
        warmup_start_lr=1e-4,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# gradient accumulation
# ---------------------------------------------------------------------------

def test_accumulate_identical_grads():
    g = {"w": np.array([1.0, -2.0])}
    out = accumulate_gradients([{k: v.copy() for k, v in g.items()} for _ in range(8)])
    np.testing.assert_allclose(out["w"], g["w"])


def test_accumulate_opposite_grads_cancel():
    g = {"w": np.array([0.5, 1.5])}
    out = accumulate_gradients([g, {"w": -g["w"]}])
    np.testing.assert_allclose(out["w"], np.zeros(2))


def test_accumulate_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        accumulate_gradients([{"w": np.zeros(2)}, {"w": np.zeros(3)}])
    with pytest.raises(ValueError):
        accumulate_gradients([])


def test_accumulated_singletons_equal_one_batch():
    samples, vocab = make_dataset(8)
    model_a = small_model(vocab, seed=1)
    model_b = small_model(vocab, seed=1)

    cfg_a = quick_cfg(epochs=1, batch_size=1, grad_accum_steps=8)
    cfg_b = quick_cfg(epochs=1, batch_size=8, grad_accum_steps=1)
    res_a = train(model_a, samples, samples[:2], vocab, cfg_a)
    res_b = train(model_b, samples, samples[:2], vocab, cfg_b)
    assert len(res_a.logs) == len(res_b.logs) == 1
    for name, tensor in model_a.params.tensors.items():
        np.testing.assert_allclose(
            tensor.data, model_b.params.tensors[name].data, atol=1e-6, err_msg=name
        )


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def test_one_step_per_sample_when_accum_is_one():
    samples, vocab = make_dataset(6)
    model = small_model(vocab)
    res = train(model, samples, samples[:2], vocab, quick_cfg(grad_accum_steps=1))
    assert len(res.logs) == 6


def test_step_count_is_ceil_of_micro_batches():
    samples, vocab = make_dataset(10)
    model = small_model(vocab)
    res = train(model, samples, samples[:2], vocab, quick_cfg(epochs=2, grad_accum_steps=4))
    # 10 micro-batches per epoch -> ceil(10/4) = 3 optimizer steps per epoch
    assert len(res.logs) == 6
    assert [entry.step for entry in res.logs] == list(range(6))


def test_logged_lr_matches_schedule():
    samples, vocab = make_dataset(12)
    model = small_model(vocab)
    cfg = quick_cfg(epochs=2, grad_accum_steps=3)
    res = train(model, samples, samples[:2], vocab, cfg)
    total = len(res.logs)
    sched = ScheduleConfig(
        base_lr=cfg.base_lr,
        warmup_start_lr=cfg.warmup_start_lr,
        warmup_steps=min(int(round(cfg.warmup_frac * total)), total - 1),
        total_steps=total,
    )
    for entry in res.logs:
        assert entry.lr == lr_at(sched, entry.step)


def test_deterministic_training_runs():
    samples, vocab = make_dataset(10)
    model_a = small_model(vocab, seed=3)
    model_b = small_model(vocab, seed=3)
    res_a = train(model_a, samples, samples[:2], vocab, quick_cfg(seed=5))
    res_b = train(model_b, samples, samples[:2], vocab, quick_cfg(seed=5))
    for name in model_a.params.tensors:
        assert np.array_equal(
            model_a.params.tensors[name].data, model_b.params.tensors[name].data
        ), name
    assert [entry.as_csv_row() for entry in res_a.logs] == [e.as_csv_row() for e in res_b.logs]


def test_frozen_tensors_bitwise_invariant_in_lora_mode():
    samples, vocab = make_dataset(10)
    model = small_model(vocab, seed=2)
    model.enable_lora(seed=4)
    frozen_before = {n: t.data.copy() for n, t in model.frozen_tensors().items()}
    train(model, samples, samples[:2], vocab, quick_cfg(mode="lora"))
    for name, tensor in model.frozen_tensors().items():
        assert np.array_equal(frozen_before[name], tensor.data), name


def test_coord_loss_trains_alone_when_text_weight_zero():
    samples, vocab = make_dataset(32)
    model = small_model(vocab, seed=0)
    cfg = quick_cfg(epochs=3, grad_accum_steps=1, base_lr=3e-3, lambda_text=0.0)
    res = train(model, samples, samples[:4], vocab, cfg)
    first = np.mean([e.coord_loss for e in res.logs[:8]])
    last = np.mean([e.coord_loss for e in res.logs[-8:]])
    assert last < first


def test_divergence_guard_trips():
    samples, vocab = make_dataset(6)
    model = small_model(vocab)
    with pytest.raises(TrainingDiverged):
        train(model, samples, samples[:2], vocab, quick_cfg(divergence_factor=1e-9))


def test_empty_dataset_rejected():
    samples, vocab = make_dataset(4)
    model = small_model(vocab)
    with pytest.raises(ValueError):
        train(model, [], samples, vocab, quick_cfg())
    with pytest.raises(ValueError):
        train(model, samples, samples, vocab, quick_cfg(mode="lora"))  # lora not enabled


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

class _EchoModel:
    """Stub implementing the evaluate() surface: attention collapsed onto
    the true hazard patch, generation echoing the true caption."""

    def __init__(self, config, vocab, samples):
        self.config = config
        self._vocab = vocab
        self._samples = samples
        self._cursor = -1

    def encode_image(self, image):
        from hazardvlm.localization import AttentionMap
        from hazardvlm.tensor import Tensor

        self._cursor += 1
        sample = self._samples[self._cursor]
        side = self.config.grid_side
        grid = np.zeros((side, side), dtype=np.float32)
        gx = int(sample.hazard.x) // self.config.patch_size
        gy = int(sample.hazard.y) // self.config.patch_size
        grid[gy, gx] = 1.0
        return None, AttentionMap(Tensor(grid))

    def encode_text(self, tokens):
        return None

    def project(self, features, which):
        return None

    def fuse(self, e_img, e_text):
        return None

    def generate(self, fused, max_len, top_p, temperature, seed):
        from hazardvlm.data import tokenize

        return tokenize(self._samples[self._cursor].caption, self._vocab)[1:-1]


def test_evaluate_echo_model_is_perfect():
    # hazards placed exactly at patch centers so argmax localization is exact
    from hazardvlm.data import AnnotatedSample, synth_caption
    from hazardvlm.localization import PixelPoint

    cfg = ModelConfig(**{**SMALL_MODEL.__dict__, "vocab_size": 32})
    img = np.zeros((1, 16, 16), dtype=np.float32)
    samples = [
        AnnotatedSample(img, PixelPoint(x, y), synth_caption(PixelPoint(x, y), cfg.patch_size))
        for x, y in ((2, 2), (6, 10), (14, 6))
    ]
    vocab = build_vocab([s.caption for s in samples] + [HAZARD_PROMPT])
    echoed = _EchoModel(cfg, vocab, samples)
    report = evaluate(echoed, samples, vocab)
    assert report.bleu4 == 1.0
    assert report.rougeL == 1.0
    assert report.mse_pixels == 0.0


def test_evaluate_report_schema_and_determinism():
    samples, vocab = make_dataset(6)
    model = small_model(vocab)
    r1 = evaluate(model, samples, vocab)
    r2 = evaluate(model, samples, vocab)
    assert r1 == r2
    assert r1.count == 6
    for field in ("bleu4", "rouge1", "rouge2", "rougeL"):
        assert 0.0 <= getattr(r1, field) <= 1.0
    assert r1.mse_pixels >= 0.0


def test_evaluate_max_samples_and_empty():
    samples, vocab = make_dataset(8)
    model = small_model(vocab)
    assert evaluate(model, samples, vocab, max_samples=3).count == 3
    with pytest.raises(ValueError):
        evaluate(model, [], vocab)


def test_write_log_format(tmp_path):
    logs = [StepLog(0, 1.0, 1.0, 0.5, 0.5, 1e-4, 2.0)]
    path = tmp_path / "log.csv"
    write_log(logs, path)
    lines = path.read_text().splitlines()
    assert lines[0] == LOG_HEADER
    assert lines[1].startswith("0,1.0,1.0,")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    samples, vocab = make_dataset(6)
    model = small_model(vocab, seed=1)
    state = AdamWState()
    state.m["x"] = np.arange(4, dtype=np.float32)
    state.v["x"] = np.arange(4, dtype=np.float32) ** 2
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, state, path, step=7, epoch=2, seed=9)

    ckpt = load_checkpoint(path)
    assert (ckpt.step, ckpt.epoch, ckpt.seed) == (7, 2, 9)
    for name, tensor in model.params.tensors.items():
        assert np.array_equal(ckpt.tensors[name], tensor.data)
    np.testing.assert_array_equal(ckpt.moments["m.x"], state.m["x"])
    np.testing.assert_array_equal(ckpt.moments["v.x"], state.v["x"])

    restored = small_model(vocab, seed=42)
    apply_checkpoint(restored, ckpt)
    for name, tensor in model.params.tensors.items():
        assert np.array_equal(restored.params.tensors[name].data, tensor.data)


def test_checkpoint_save_load_save_idempotent(tmp_path):
    samples, vocab = make_dataset(4)
    model = small_model(vocab, seed=1)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(model, None, p1, step=1, epoch=1, seed=1)
    clone = small_model(vocab, seed=2)
    apply_checkpoint(clone, load_checkpoint(p1))
    save_checkpoint(clone, None, p2, step=1, epoch=1, seed=1)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_corruption_errors_are_distinct(tmp_path):
    samples, vocab = make_dataset(4)
    model = small_model(vocab)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, None, path, step=0, epoch=0, seed=0)
    blob = path.read_bytes()

    bad_magic = tmp_path / "magic.ckpt"
    bad_magic.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(BadMagic):
        load_checkpoint(bad_magic)

    bad_version = tmp_path / "version.ckpt"
    bad_version.write_bytes(blob[:4] + b"\x63\x00\x00\x00" + blob[8:])
    with pytest.raises(BadVersion):
        load_checkpoint(bad_version)

    truncated = tmp_path / "trunc.ckpt"
    truncated.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(Truncated):
        load_checkpoint(truncated)


def test_pretrain_checkpoint_loads_into_lora_model(tmp_path):
    samples, vocab = make_dataset(8)
    base = small_model(vocab, seed=1)
    train(base, samples, samples[:2], vocab, quick_cfg())
    path = tmp_path / "base.ckpt"
    save_checkpoint(base, None, path, step=4, epoch=1, seed=0)

    finetune = small_model(vocab, seed=1)
    finetune.enable_lora(seed=33)
    fresh_adapters = {
        n: t.data.copy() for n, t in finetune.params.tensors.items() if n.startswith("lora.")
    }
    apply_checkpoint(finetune, load_checkpoint(path))
    # base weights came from the checkpoint...
    for name, tensor in base.params.tensors.items():
        assert np.array_equal(finetune.params.tensors[name].data, tensor.data)
    # ...while adapters kept their fresh initialization
    for name, data in fresh_adapters.items():
        assert np.array_equal(finetune.params.tensors[name].data, data)


def test_unknown_checkpoint_tensor_rejected(tmp_path):
    samples, vocab = make_dataset(4)
    model = small_model(vocab)
    ckpt = Checkpoint(tensors={"nonexistent": np.zeros(3, np.float32)}, moments={}, step=0, epoch=0, seed=0)
    from hazardvlm.training import CheckpointError

    with pytest.raises(CheckpointError):
        apply_checkpoint(model, ckpt)


def test_optimizer_state_round_trips(tmp_path):
    from hazardvlm.training import restore_optimizer_state

    samples, vocab = make_dataset(6)
    model = small_model(vocab, seed=1)
    cfg = quick_cfg(checkpoint_path=str(tmp_path / "m.ckpt"))
    train(model, samples, samples[:2], vocab, cfg)

    ckpt = load_checkpoint(tmp_path / "m.ckpt")
    state = restore_optimizer_state(ckpt, cfg)
    assert state.t == ckpt.step
    assert set(state.m) == set(model.trainable_tensors())
    for name, arr in state.m.items():
        np.testing.assert_array_equal(arr, ckpt.moments[f"m.{name}"])
        assert (state.v[name] >= 0).all()
