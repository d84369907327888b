import math

import numpy as np
import pytest
import torch
from torch.func import functional_call

import db
import services.gan as gan_module
from errors import ArgumentError, ConfigurationError, NonFiniteLossError
from services.gan import (
    HISTORY_COLUMNS,
    Discriminator,
    GanCheckpoint,
    MappingNetwork,
    ModulatedConv2d,
    SynthesisNetwork,
    discriminate,
    discriminator_accuracy,
    discriminator_loss,
    fine_tune_gan,
    generate,
    generator_loss,
    map_latent,
    r1_penalty,
    sample_latent,
    train_gan,
)
from services.synthetic_data import load_corpus


# ----------------------------
# Networks
# ----------------------------

def test_modulated_conv_gradcheck():
    torch.manual_seed(0)
    conv = ModulatedConv2d(2, 3, d_w=4, kernel_size=3).double()
    x = torch.randn(2, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda a, b: conv(a, b), (x, w), eps=1e-6, atol=1e-5)


def test_mapping_network_gradcheck():
    torch.manual_seed(1)
    mapping = MappingNetwork(3, 4, num_layers=2).double()
    z = torch.randn(3, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(mapping, (z,), eps=1e-6, atol=1e-5)


def test_modulated_conv_styles_are_per_sample():
    torch.manual_seed(2)
    conv = ModulatedConv2d(2, 2, d_w=3, kernel_size=3)
    x = torch.randn(1, 2, 4, 4).expand(2, -1, -1, -1)
    w = torch.randn(2, 3)
    out = conv(x, w)
    single = conv(x[:1], w[1:])
    torch.testing.assert_close(out[1:], single)


def test_losses_at_zero_logits():
    zeros = torch.zeros(4)
    assert float(generator_loss(zeros)) == pytest.approx(math.log(2))
    assert float(discriminator_loss(zeros, zeros)) == pytest.approx(2 * math.log(2))


def test_r1_penalty_of_linear_critic():
    critic = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(12, 1, bias=False))
    with torch.no_grad():
        critic[1].weight.fill_(0.5)
    reals = torch.randn(3, 3, 2, 2)
    logits, penalty = r1_penalty(critic, reals)
    assert logits.shape == (3, 1)
    assert float(penalty) == pytest.approx(12 * 0.25)


def _miniature(seed: int, d_channels: int = 2):
    torch.manual_seed(seed)
    return (MappingNetwork(2, 2, num_layers=1).double(), SynthesisNetwork(8, d_w=2, channels=2).double(),
            Discriminator(8, channels=d_channels).double())


def _leaf_params(*modules):
    names = [[n for n, _ in m.named_parameters()] for m in modules]
    params = tuple(p.detach().clone().requires_grad_(True) for m in modules for p in m.parameters())
    return names, params


def _bind(names, params):
    out, i = [], 0
    for group in names:
        out.append(dict(zip(group, params[i:i + len(group)])))
        i += len(group)
    return out


def test_adversarial_losses_gradcheck():
    mapping, synthesis, disc = _miniature(3)
    names, params = _leaf_params(mapping, synthesis, disc)
    assert 200 <= sum(p.numel() for p in params) <= 320
    gen = torch.Generator().manual_seed(4)
    z = torch.randn(2, 2, generator=gen, dtype=torch.float64)
    reals = torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1

    def losses(*flat):
        mp, sp, dp = _bind(names, flat)
        fake = functional_call(synthesis, sp, (functional_call(mapping, mp, (z,)),))
        fake_logits = functional_call(disc, dp, (fake,))
        real_logits = functional_call(disc, dp, (reals,))
        return generator_loss(fake_logits), discriminator_loss(real_logits, fake_logits)

    assert torch.autograd.gradcheck(losses, params, eps=1e-6, atol=1e-5)


def test_r1_penalty_double_backward():
    _, _, disc = _miniature(5, d_channels=1)
    names, params = _leaf_params(disc)
    reals = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(6), dtype=torch.float64) * 2 - 1

    def penalty(*flat):
        (dp,) = _bind(names, flat)
        return r1_penalty(lambda x: functional_call(disc, dp, (x,)), reals)[1]

    assert torch.autograd.gradcheck(penalty, params, eps=1e-6, atol=1e-5)
    assert torch.autograd.gradgradcheck(penalty, params, eps=1e-6, atol=1e-5)


# ----------------------------
# Inference helpers
# ----------------------------

def test_sample_latent_is_seeded():
    a = sample_latent(4, seed=9, d_z=8)
    assert a.shape == (4, 8)
    assert np.array_equal(a, sample_latent(4, seed=9, d_z=8))
    assert not np.array_equal(a, sample_latent(4, seed=10, d_z=8))
    with pytest.raises(ArgumentError):
        sample_latent(0, seed=1)


def test_map_and_generate_shapes(tiny_gan):
    z = sample_latent(3, seed=1, d_z=tiny_gan.d_z)
    w = map_latent(z, tiny_gan.mapping)
    assert w.shape == (3, tiny_gan.d_w)
    assert map_latent(z[0], tiny_gan.mapping).shape == (tiny_gan.d_w,)
    images = generate(w, tiny_gan.synthesis)
    assert images.shape == (3, 32, 32, 3)
    assert images.min() >= -1 and images.max() <= 1
    assert generate(w[0], tiny_gan.synthesis).shape == (32, 32, 3)


def test_code_dimension_errors(tiny_gan):
    with pytest.raises(ArgumentError):
        map_latent(np.zeros(tiny_gan.d_z + 1), tiny_gan.mapping)
    with pytest.raises(ArgumentError):
        generate(np.full(tiny_gan.d_w, np.nan), tiny_gan.synthesis)


def test_discriminate(tiny_gan):
    images = np.zeros((2, 32, 32, 3), dtype=np.float32)
    scores = discriminate(images, tiny_gan.discriminator)
    assert scores.shape == (2,)
    assert isinstance(discriminate(images[0], tiny_gan.discriminator), float)
    with pytest.raises(ArgumentError):
        discriminate(np.zeros((16, 16, 3)), tiny_gan.discriminator)


def test_discriminator_accuracy_in_unit_interval(tiny_gan, tiny_corpus):
    reals = load_corpus(tiny_corpus).images[:4]
    assert 0.0 <= discriminator_accuracy(tiny_gan, reals, seed=0) <= 1.0


# ----------------------------
# Training and checkpoints
# ----------------------------

def test_training_history(tiny_gan, tiny_gan_config):
    assert tiny_gan.step == tiny_gan_config.steps
    assert len(tiny_gan.history) == tiny_gan_config.steps
    assert list(tiny_gan.history[0]) == HISTORY_COLUMNS
    assert all(0.0 <= row["d_accuracy"] <= 1.0 for row in tiny_gan.history)


def test_training_is_deterministic(tiny_corpus, tiny_gan_config, tiny_gan):
    again = train_gan(tiny_corpus, tiny_gan_config)
    assert again.generator_checksum() == tiny_gan.generator_checksum()
    assert again.fingerprint() == tiny_gan.fingerprint()


def test_resolution_mismatch(tiny_corpus, tiny_gan_config):
    with pytest.raises(ArgumentError):
        train_gan(tiny_corpus, tiny_gan_config.model_copy(update={"resolution": 64}))


def test_checkpoint_round_trip(tiny_gan, tmp_path):
    path = tiny_gan.save(tmp_path / "gan.zip")
    loaded = GanCheckpoint.load(path)
    assert loaded.fingerprint() == tiny_gan.fingerprint()
    assert loaded.step == tiny_gan.step
    assert loaded.corpus_fingerprint == tiny_gan.corpus_fingerprint
    w = map_latent(sample_latent(2, seed=3, d_z=loaded.d_z), loaded.mapping)
    np.testing.assert_array_equal(generate(w, loaded.synthesis), generate(w, tiny_gan.synthesis))
    assert [r["step"] for r in loaded.history] == [r["step"] for r in tiny_gan.history]
    assert tiny_gan.save(tmp_path / "again.zip").read_bytes() == path.read_bytes()


def test_checkpoint_kind_is_checked(tiny_gan, tmp_path):
    path = tiny_gan.save(tmp_path / "gan.zip")
    with pytest.raises(ConfigurationError):
        db.load_checkpoint(path, "encoder")


def test_frozen_generator_restores_flags(tiny_gan):
    with tiny_gan.frozen_generator():
        assert not any(p.requires_grad for p in tiny_gan.synthesis.parameters())
        assert all(p.requires_grad for p in tiny_gan.discriminator.parameters())
    assert all(p.requires_grad for p in tiny_gan.mapping.parameters())


def test_fine_tune_leaves_parent_untouched(tiny_gan, tiny_clinic):
    before = tiny_gan.generator_checksum()
    tuned = fine_tune_gan(tiny_gan, tiny_clinic, steps=1)
    assert tiny_gan.generator_checksum() == before
    assert tuned.generator_checksum() != before
    assert tuned.parent_fingerprint == tiny_gan.fingerprint()
    assert tuned.corpus_fingerprint == tiny_clinic.fingerprint()
    assert len(tuned.history) == 1
    assert tuned.step == tiny_gan.step + 1


def test_fine_tune_zero_steps_is_a_copy(tiny_gan, tiny_clinic):
    tuned = fine_tune_gan(tiny_gan, tiny_clinic, steps=0)
    assert tuned.generator_checksum() == tiny_gan.generator_checksum()
    assert tuned.synthesis is not tiny_gan.synthesis
    with pytest.raises(ArgumentError):
        fine_tune_gan(tiny_gan, tiny_clinic, steps=-1)


@pytest.mark.parametrize("loss_name", ["generator_loss", "discriminator_loss"])
def test_non_finite_loss_writes_diagnostic(tiny_corpus, tiny_gan_config, monkeypatch, loss_name):
    original = getattr(gan_module, loss_name)
    monkeypatch.setattr(gan_module, loss_name, lambda *logits: original(*logits) * float("nan"))
    with pytest.raises(NonFiniteLossError) as info:
        train_gan(tiny_corpus, tiny_gan_config)
    assert info.value.checkpoint_path.endswith("gan_nonfinite_step000001.zip")
    archive = db.read_archive(info.value.checkpoint_path)
    assert archive.manifest["step"] == 0
    for name, arr in archive.arrays.items():
        assert np.isfinite(arr).all(), name
    loaded, fresh = GanCheckpoint.load(info.value.checkpoint_path), GanCheckpoint.initialize(tiny_gan_config)
    for part in ("mapping", "synthesis", "discriminator"):
        before, saved = getattr(fresh, part).state_dict(), getattr(loaded, part).state_dict()
        assert all(torch.equal(before[k], saved[k]) for k in before), part
