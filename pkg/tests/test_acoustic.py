import numpy as np
import pytest
import torch

from laml_tts.acoustic import (
    AcousticModel,
    ModelConfig,
    ModelOutput,
    ShapeError,
    TTSBatch,
    VarianceOutput,
    collate,
    inference_durations,
    length_regulate,
    toy_config,
    tts_loss,
    tts_loss_fn,
)
from laml_tts.frontend import default_inventory

from oracles import regulate_loop

F = default_inventory().dim


def _batch(L=7, B=1, speaker_dim=704, seed=0, language=0):
    g = torch.Generator().manual_seed(seed)
    return TTSBatch(
        features=torch.randint(-1, 2, (B, L, F), generator=g).float(),
        unit_mask=torch.ones(B, L, dtype=torch.bool),
        boundary_mask=torch.zeros(B, L, dtype=torch.bool),
        language_ids=torch.full((B,), language),
        speaker=torch.randn(B, speaker_dim, generator=g),
    )


@pytest.fixture(scope="module")
def default_model():
    torch.manual_seed(0)
    return AcousticModel(ModelConfig(language_count=2)).eval()


def test_encoder_width_default(default_model):
    b = _batch()
    h = default_model.encode(b.features, b.language_ids, b.unit_mask)
    assert h.shape == (1, 7, 384)


def test_language_changes_hidden(default_model):
    b = _batch()
    h0 = default_model.encode(b.features, torch.tensor([0]), b.unit_mask)
    h1 = default_model.encode(b.features, torch.tensor([1]), b.unit_mask)
    assert not torch.allclose(h0, h1)
    with pytest.raises(ValueError):
        default_model.encode(b.features, torch.tensor([2]), b.unit_mask)


def test_zero_layer_encoder_is_projection_plus_language():
    torch.manual_seed(0)
    model = AcousticModel(toy_config(encoder_layers=0, language_count=3))
    b = _batch(speaker_dim=32, language=2)
    h = model.encode(b.features, b.language_ids, b.unit_mask)
    expected = model.input_proj(b.features) + model.language_table.weight[2]
    assert torch.equal(h, expected)


def test_zero_layer_decoder_is_output_projection():
    torch.manual_seed(0)
    model = AcousticModel(toy_config(decoder_layers=0))
    x = torch.randn(1, 10, 64)
    assert torch.equal(model.decode(x, torch.ones(1, 10, dtype=torch.bool)), model.mel_out(x))


def test_decode_shape_and_determinism(default_model):
    x = torch.randn(1, 10, 384)
    m = torch.ones(1, 10, dtype=torch.bool)
    y = default_model.decode(x, m)
    assert y.shape == (1, 10, 80)
    assert torch.equal(y, default_model.decode(x, m))


def test_speaker_injection_contract():
    torch.manual_seed(0)
    model = AcousticModel(toy_config())
    h = torch.randn(3, 9, 64) * 5 + 2
    spk = torch.randn(3, 32) * 10
    with torch.no_grad():
        _, pre = model.speaker_injection(h, spk, return_pre_affine=True)
        squashed = model.speaker_injection.squash(spk)
    assert torch.allclose(pre.mean(-1), torch.zeros(3, 9), atol=1e-4)
    assert torch.allclose(pre.var(-1, unbiased=False), torch.ones(3, 9), atol=1e-4)
    assert (squashed.abs() < 1).all()
    with pytest.raises(ShapeError):
        model.speaker_injection(h, torch.randn(3, 31))


def test_speaker_changes_output():
    torch.manual_seed(0)
    model = AcousticModel(toy_config())
    h = torch.randn(1, 5, 64)
    a, b = torch.randn(1, 32), torch.randn(1, 32)
    assert not torch.allclose(model.inject_speaker(h, a), model.inject_speaker(h, b))
    assert torch.equal(model.inject_speaker(h, a), model.inject_speaker(h, a))


def test_variance_shapes(default_model):
    b = _batch()
    h = default_model.encode(b.features, b.language_ids, b.unit_mask)
    var = default_model.predict_variances(h, b.unit_mask)
    for t in (var.log_durations, var.pitch, var.energy):
        assert t.shape == (1, 7)


def test_inference_duration_rounding():
    log_d = torch.tensor([[-20.0, np.log(4.0), np.log(3.4), 5.0]])
    mask = torch.ones(1, 4, dtype=torch.bool)
    bound = torch.tensor([[False, False, False, True]])
    assert inference_durations(log_d, bound, mask).tolist() == [[0, 3, 2, 0]]


def test_teacher_forcing_passes_targets(toy_samples):
    torch.manual_seed(0)
    model = AcousticModel(toy_config(language_count=2))
    batch = collate(toy_samples[0][:2])
    out = model(batch)
    assert torch.equal(out.used_durations, batch.durations.masked_fill(batch.boundary_mask, 0))
    assert torch.equal(out.used_pitch, batch.pitch) and torch.equal(out.used_energy, batch.energy)
    assert out.mel.shape == batch.mel.shape


# -- length regulator ---------------------------------------------------------


def test_length_regulate_examples():
    h = torch.arange(3 * 4, dtype=torch.float32).view(3, 4)
    out, mask = length_regulate(h, torch.tensor([2, 4, 3]), torch.tensor([False, True, False]))
    assert out.shape == (5, 4) and mask.all()
    assert torch.equal(out, h[[0, 0, 2, 2, 2]])
    h2 = h[:2]
    out, _ = length_regulate(h2, torch.tensor([2, 3]), torch.tensor([False, False]))
    assert torch.equal(out, h2[[0, 0, 1, 1, 1]])
    with pytest.raises(ShapeError):
        length_regulate(h, torch.tensor([1, -1, 1]), torch.zeros(3, dtype=torch.bool))


def test_length_regulate_fuzz(rng):
    for _ in range(500):
        L = int(rng.integers(1, 10))
        h = rng.normal(size=(L, 3)).astype(np.float32)
        h[:, 0] = np.arange(L)  # row tag
        durations = rng.integers(0, 6, size=L)
        boundaries = {i for i in range(L) if rng.random() < 0.3}
        bmask = torch.tensor([i in boundaries for i in range(L)])
        out, _ = length_regulate(torch.from_numpy(h), torch.from_numpy(durations), bmask)
        ref, origin = regulate_loop(h, durations, boundaries)
        assert out.shape[0] == sum(d for i, d in enumerate(durations) if i not in boundaries)
        np.testing.assert_array_equal(out.numpy(), ref)
        assert not (set(out[:, 0].long().tolist()) & boundaries)


# -- loss ---------------------------------------------------------------------


def _perfect_output(batch):
    log_d = torch.log(batch.durations.float() + 1) * batch.unit_mask
    return ModelOutput(batch.mel.clone(), batch.frame_mask, VarianceOutput(log_d, batch.pitch.clone(), batch.energy.clone()),
                       batch.durations, batch.pitch, batch.energy)


def test_perfect_prediction_has_zero_loss(toy_samples):
    batch = collate(toy_samples[0][:3])
    total, parts = tts_loss(_perfect_output(batch), batch)
    assert float(total) == 0.0 and parts["mel_l1"] == 0.0


def test_boundary_durations_are_masked(toy_samples):
    batch = collate(toy_samples[1][:2])
    assert batch.boundary_mask.any()
    out = _perfect_output(batch)
    out.variances.log_durations = out.variances.log_durations + 0.1
    before, _ = tts_loss(out, batch)
    batch.durations = batch.durations.masked_fill(batch.boundary_mask, 7)
    after, _ = tts_loss(out, batch)
    assert float(before) == float(after)


def test_loss_non_negative(toy_samples, rng):
    torch.manual_seed(0)
    model = AcousticModel(toy_config(language_count=2))
    samples = toy_samples[0] + toy_samples[1]
    for _ in range(100):
        pick = [samples[i] for i in rng.choice(len(samples), size=int(rng.integers(1, 4)), replace=False)]
        batch = collate(pick)
        out = _perfect_output(batch)
        out.mel = out.mel + torch.from_numpy(rng.normal(size=tuple(out.mel.shape)).astype(np.float32))
        out.variances.pitch = torch.from_numpy(rng.normal(size=tuple(batch.pitch.shape)).astype(np.float32))
        assert float(tts_loss(out, batch)[0]) >= 0
    assert float(tts_loss_fn(model, samples[:2])[0].detach()) >= 0


def test_frame_count_mismatch_raises(toy_samples):
    batch = collate(toy_samples[0][:1])
    out = _perfect_output(batch)
    out.mel = out.mel[:, :-1]
    with pytest.raises(ShapeError):
        tts_loss(out, batch)


def test_gradient_check_float64(toy_samples):
    torch.manual_seed(0)
    model = AcousticModel(toy_config(language_count=2, hidden_dim=16, ffn_dim=32, bottleneck_dim=4)).double()
    samples = toy_samples[0][:2]
    loss, _ = tts_loss_fn(model, samples)
    model.zero_grad()
    loss.backward()
    params = [p for p in model.parameters() if p.requires_grad]
    g = torch.Generator().manual_seed(3)
    eps = 1e-6
    checked = 0
    while checked < 20:
        p = params[int(torch.randint(len(params), (1,), generator=g))]
        idx = int(torch.randint(p.numel(), (1,), generator=g))
        analytic = float(p.grad.view(-1)[idx])
        flat = p.data.view(-1)
        orig = float(flat[idx])
        with torch.no_grad():
            flat[idx] = orig + eps
            up = float(tts_loss_fn(model, samples)[0])
            flat[idx] = orig - eps
            down = float(tts_loss_fn(model, samples)[0])
            flat[idx] = orig
        numeric = (up - down) / (2 * eps)
        scale = max(abs(analytic), abs(numeric))
        if scale < 1e-7:
            continue  # parameter does not influence the loss here (e.g. unused language row)
        assert abs(analytic - numeric) <= 1e-3 * scale, (p.shape, idx, analytic, numeric)
        checked += 1


def test_synthesize_and_add_language(toy_samples):
    torch.manual_seed(0)
    model = AcousticModel(toy_config(language_count=2))
    s = toy_samples[0][0]
    mel = model.synthesize(s.sequence, s.speaker)
    assert mel.ndim == 2 and mel.shape[1] == 80 and mel.shape[0] >= 1
    old = model.language_table.weight.detach().clone()
    assert model.add_language() == 2
    assert torch.equal(model.language_table.weight[:2], old)
    assert torch.allclose(model.language_table.weight[2], old.mean(0))
    model.synthesize(s.sequence, s.speaker, language_id=2)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=64, attention_heads=5)
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=64, bottleneck_dim=64)
    cfg = toy_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
