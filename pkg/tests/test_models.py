import numpy as np
import pytest

from uad3d import tensor as T
from uad3d.losses import LossState, robust_loss
from uad3d.models import (
    CheckpointError,
    VaeConfig,
    VaeModel,
    decode,
    encode,
    forward,
    load_checkpoint,
    reparameterize,
    save_checkpoint,
)
from uad3d.tensor import DimensionError, Tensor

SMALL = (2, 3, 4, 4)


def config(dim, bottleneck, spatial=None, **kw):
    spatial = spatial or (16,) * dim
    kw.setdefault("channel_widths", SMALL)
    kw.setdefault("latent_dim", 4)
    return VaeConfig(dimensionality=dim, bottleneck=bottleneck, input_shape=(1,) + tuple(spatial), **kw)


ALL = [(d, b) for d in (2, 3) for b in ("spatial", "dense")]


def test_dense_3d_latent_shape_at_64():
    cfg = VaeConfig(dimensionality=3, bottleneck="dense", latent_dim=128, input_shape=(1, 64, 64, 64),
                    channel_widths=(2, 2, 2, 2))
    mu, lv = encode(VaeModel(cfg), Tensor(np.zeros((1, 1, 64, 64, 64), np.float32)))
    assert mu.shape == (1, 128) and lv.shape == (1, 128)


def test_spatial_2d_latent_shape_at_160x192():
    cfg = VaeConfig(dimensionality=2, bottleneck="spatial", latent_dim=16, input_shape=(1, 160, 192),
                    channel_widths=(2, 2, 2, 2))
    mu, _ = encode(VaeModel(cfg), Tensor(np.zeros((1, 1, 160, 192), np.float32)))
    assert mu.shape == (1, 16, 10, 12)


def test_default_widths():
    assert VaeConfig().channel_widths == (32, 64, 128, 256)
    assert VaeConfig().latent_dim == 128


@pytest.mark.parametrize("dim,bottleneck", ALL)
def test_zero_heads_give_prior(rng, dim, bottleneck):
    model = VaeModel(config(dim, bottleneck), zero_heads=True)
    mu, lv = encode(model, Tensor(rng.uniform(size=(2, 1) + (16,) * dim).astype(np.float32)))
    assert not mu.data.any() and not lv.data.any()


@pytest.mark.parametrize("dim,bottleneck", ALL)
def test_zero_output_layer_gives_half(rng, dim, bottleneck):
    cfg = config(dim, bottleneck)
    model = VaeModel(cfg, zero_output=True)
    out = decode(model, Tensor(rng.normal(size=(2,) + cfg.latent_shape).astype(np.float32)))
    np.testing.assert_array_equal(out.data, 0.5)


@pytest.mark.parametrize("dim,bottleneck", ALL)
@pytest.mark.parametrize("spatial", ["desk", "paper"])
def test_round_trip_shape_and_rank(dim, bottleneck, spatial):
    shape = (64,) * 3 if dim == 3 else (160, 192)
    if spatial == "desk":
        shape = (16,) * dim
    cfg = config(dim, bottleneck, spatial=shape, channel_widths=(1, 1, 1, 1), latent_dim=2)
    model = VaeModel(cfg)
    x = Tensor(np.full((1,) + cfg.input_shape, 0.5, np.float32))
    with T.no_grad():
        x_hat, lat = forward(model, x, seed=0)
    assert x_hat.shape == x.shape
    # spatial latents keep channel + spatial axes; dense latents are (batch, N)
    expected_rank = x.ndim if bottleneck == "spatial" else 2
    assert lat.z.ndim == expected_rank


@pytest.mark.parametrize("dim,bottleneck", ALL)
def test_output_in_unit_interval(rng, dim, bottleneck):
    model = VaeModel(config(dim, bottleneck), seed=3)
    for p in model.params.values():
        p.data *= 4.0
    x = Tensor(rng.normal(0, 3, size=(2, 1) + (16,) * dim).astype(np.float32))
    with T.no_grad():
        out, _ = forward(model, x, seed=1)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_encode_shape_mismatch():
    model = VaeModel(config(2, "dense"))
    with pytest.raises(DimensionError):
        encode(model, Tensor(np.zeros((1, 1, 32, 16), np.float32)))


def test_decode_shape_mismatch():
    model = VaeModel(config(3, "spatial"))
    with pytest.raises(DimensionError):
        decode(model, Tensor(np.zeros((1, 4, 2, 1, 1), np.float32)))


def test_config_rejects_indivisible_extent():
    with pytest.raises(ValueError):
        VaeConfig(dimensionality=2, input_shape=(1, 24, 16))


def test_reparameterize_examples():
    mu = Tensor([[0.3, -0.2]])
    lat = reparameterize(mu, Tensor([[1.0, 2.0]]), epsilon=np.zeros((1, 2)))
    np.testing.assert_array_equal(lat.z.data, mu.data)
    lat = reparameterize(Tensor([[0.0, 0.0]]), Tensor([[0.0, 0.0]]), epsilon=np.array([[1.0, -1.0]]))
    np.testing.assert_array_equal(lat.z.data, [[1.0, -1.0]])


def test_reparameterize_seeded_is_bitwise_repeatable(rng):
    mu, lv = Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(3, 5)))
    a = reparameterize(mu, lv, 42).z.data
    b = reparameterize(mu, lv, 42).z.data
    assert a.tobytes() == b.tobytes()
    lat = reparameterize(mu, lv, 42)
    np.testing.assert_allclose(lat.z.data, mu.data + np.exp(0.5 * lv.data) * lat.epsilon, rtol=1e-15)


def test_reparameterize_gradient_reaches_mu_and_logvar():
    mu = Tensor([[0.5]], requires_grad=True)
    lv = Tensor([[0.2]], requires_grad=True)
    lat = reparameterize(mu, lv, epsilon=np.array([[2.0]]))
    T.sum(lat.z).backward()
    assert mu.grad[0, 0] == 1.0
    assert lv.grad[0, 0] == pytest.approx(0.5 * np.exp(0.1) * 2.0)


@pytest.mark.parametrize("dim,bottleneck", ALL)
def test_every_parameter_receives_gradient(rng, dim, bottleneck):
    cfg = config(dim, bottleneck, dtype="f64")
    model = VaeModel(cfg, seed=0)
    x = Tensor(rng.uniform(size=(2,) + cfg.input_shape))
    x_hat, lat = forward(model, x, seed=0)
    total, _ = robust_loss(LossState(), x, x_hat, lat.mu, lat.logvar)
    total.backward()
    for name, p in model.params.items():
        assert p.grad is not None and p.grad.shape == p.shape, name
    # heads and output layer carry signal
    for name in ("enc.mu.weight", "dec.head.weight", "dec.up3.weight"):
        assert np.any(model.params[name].grad != 0), name


@pytest.mark.parametrize("dim,bottleneck", ALL)
def test_checkpoint_round_trip_bit_exact(tmp_path, dim, bottleneck):
    model = VaeModel(config(dim, bottleneck), seed=5)
    path = tmp_path / "m.uadm"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    assert list(loaded.params) == list(model.params)
    for name in model.params:
        assert loaded.params[name].data.tobytes() == model.params[name].data.tobytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.uadm"
    save_checkpoint(VaeModel(config(2, "dense")), path)
    raw = bytearray(path.read_bytes())
    raw[0] = ord("X")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.uadm"
    save_checkpoint(VaeModel(config(2, "dense")), path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
