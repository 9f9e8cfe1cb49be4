import numpy as np
import pytest

from dmvae import tensor as T
from dmvae.data import BimodalBatch
from dmvae.distributions import ConcreteParams, GaussianParams, poe_concrete, poe_gaussian
from dmvae.model import DMVAE, ModelConfig, NoiseExhausted, NoiseSource


def zero_model(**kw):
    model = DMVAE(ModelConfig(**kw))
    model.load_state_dict({k: np.zeros_like(v) for k, v in model.state_dict().items()})
    return model


def set_params(model, **arrays):
    state = model.state_dict()
    for k, v in arrays.items():
        state[k.replace("__", ".")] = np.asarray(v, dtype=float)
    model.load_state_dict(state)


def batch(n=4, paired=None, dim=784, classes=10, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.eye(classes)[rng.integers(0, classes, n)]
    mask = np.ones(n, bool) if paired is None else np.asarray(paired)
    return BimodalBatch(rng.random((n, dim)), labels, mask)


# --- config -------------------------------------------------------------------

def test_discrete_needs_matching_shared_dim():
    with pytest.raises(ValueError, match="shared_dim"):
        ModelConfig(shared_kind="discrete", shared_dim=8, label_classes=10)


def test_multilabel_must_be_discrete():
    with pytest.raises(ValueError):
        ModelConfig(shared_kind="continuous", multilabel=True)


def test_config_round_trips_through_strings():
    cfg = ModelConfig(image_dim=16, label_classes=4, shared_dim=4, temperature=0.5)
    as_text = {k: str(v) for k, v in cfg.to_dict().items()}
    assert ModelConfig.from_dict(as_text) == cfg


# --- encoders -----------------------------------------------------------------

def test_zero_network_encoders():
    model = zero_model()
    priv, shared = model.encode_image(np.full((3, 784), 0.5))
    np.testing.assert_array_equal(priv.mu.data, 0)
    np.testing.assert_array_equal(priv.logvar.data, 0)
    np.testing.assert_array_equal(shared.logits.data, 0)
    np.testing.assert_array_equal(model.encode_label(np.eye(10)[:3]).logits.data, 0)


@pytest.mark.parametrize("batch_size", [1, 7])
def test_encoder_shapes(batch_size):
    model = DMVAE(ModelConfig())
    priv, shared = model.encode_image(np.zeros((batch_size, 784)))
    assert priv.mu.shape == priv.logvar.shape == (batch_size, 10)
    assert shared.logits.shape == (batch_size, 10)
    assert model.encode_label(np.eye(10)[:batch_size % 10 or 1]).logits.shape[1] == 10
    cont = DMVAE(ModelConfig(shared_kind="continuous"))
    _, sh = cont.encode_image(np.zeros((batch_size, 784)))
    assert sh.mu.shape == (batch_size, 10)


def test_handcrafted_image_encoder():
    cfg = ModelConfig(image_dim=2, label_classes=2, private_dim=1, shared_dim=2, hidden_dim=2)
    model = zero_model(**cfg.to_dict())
    set_params(model, enc_image__w1=[[1, 0], [0, 1]], enc_image__b1=[0, 0],
               enc_image__w2=[[1, 0, 2, 0], [0, 1, 0, 3]], enc_image__b2=[0.5, 0, 0, -1])
    priv, shared = model.encode_image(np.array([[0.2, 0.4]]))
    # hidden = relu([0.2, 0.4]); head = h @ w2 + b2 = [0.7, 0.4, 0.4, 0.2]
    np.testing.assert_allclose(priv.mu.data, [[0.7]])
    np.testing.assert_allclose(priv.logvar.data, [[0.4]])
    np.testing.assert_allclose(shared.logits.data, [[0.4, 0.2]])


def test_label_encoder_is_permutation_equivariant_for_identity_fixture():
    cfg = ModelConfig(image_dim=3, label_classes=3, private_dim=1, shared_dim=3, hidden_dim=3)
    model = zero_model(**cfg.to_dict())
    perm = np.eye(3)[[2, 0, 1]]
    set_params(model, enc_label__w1=np.eye(3), enc_label__w2=perm * 4.0)
    y = np.eye(3)
    logits = model.encode_label(y).logits.data
    logits_perm = model.encode_label(y @ perm.T).logits.data
    np.testing.assert_allclose(logits, y @ perm * 4.0)
    np.testing.assert_allclose(logits_perm, y @ perm.T @ perm * 4.0)


def test_encoders_validate_inputs():
    model = DMVAE(ModelConfig())
    with pytest.raises(T.ShapeError):
        model.encode_image(np.zeros((2, 100)))
    with pytest.raises(ValueError, match="one-hot"):
        model.encode_label(np.array([[1.0, 1.0] + [0.0] * 8]))
    with pytest.raises(ValueError, match="0/1"):
        model.encode_label(np.full((1, 10), 0.1))


# --- fusion ---------------------------------------------------------------------

def test_single_discrete_expert_is_unchanged():
    model = DMVAE(ModelConfig())
    e = ConcreteParams(np.random.default_rng(0).normal(size=(2, 10)), 0.66)
    np.testing.assert_allclose(model.fuse_shared([e]).probs(), e.probs(), atol=1e-15)


def test_two_discrete_experts_reference_example():
    model = DMVAE(ModelConfig(image_dim=4, label_classes=2, shared_dim=2))
    fused = model.fuse_shared([ConcreteParams(np.log([[4.0, 3.0]]), 0.66),
                               ConcreteParams(np.log([[2.0, 3.0]]), 0.66)])
    np.testing.assert_allclose(fused.probs(), [[8 / 17, 9 / 17]], atol=1e-15)


def test_single_continuous_expert_is_fused_with_prior():
    model = DMVAE(ModelConfig(shared_kind="continuous", shared_dim=1, label_classes=2))
    fused = model.fuse_shared([GaussianParams(np.array([[1.0]]), np.array([[0.0]]))])
    assert float(fused.mu.data[0, 0]) == pytest.approx(0.5)
    assert float(np.exp(fused.logvar.data[0, 0])) == pytest.approx(0.5)


def test_fuse_needs_an_expert():
    with pytest.raises(ValueError):
        DMVAE(ModelConfig()).fuse_shared([])


# --- decoders -------------------------------------------------------------------

def test_zero_network_decoders_output_half():
    model = zero_model()
    np.testing.assert_array_equal(model.decode_image(np.zeros((2, 10)), np.eye(10)[:2]).data, 0.5)
    np.testing.assert_array_equal(model.decode_label(np.eye(10)[:2]).data, 0.5)


def test_decoder_shapes_and_width_errors():
    model = DMVAE(ModelConfig())
    assert model.decode_image(np.zeros((3, 10)), np.eye(10)[:3]).shape == (3, 784)
    assert model.decode_label(np.eye(10)[:3]).shape == (3, 10)
    with pytest.raises(T.ShapeError):
        model.decode_image(np.zeros((3, 9)), np.eye(10)[:3])
    with pytest.raises(T.ShapeError):
        model.decode_label(np.zeros((3, 4)))


def test_handcrafted_decoders():
    cfg = ModelConfig(image_dim=2, label_classes=2, private_dim=1, shared_dim=2, hidden_dim=2)
    model = zero_model(**cfg.to_dict())
    set_params(model, dec_image__w1=[[1, 0], [0, 1], [0, 0]], dec_image__w2=[[2, 0], [0, -1]],
               dec_label__w1=[[1, 0], [0, 1]], dec_label__w2=[[3, 0], [0, 3]],
               dec_label__b2=[-1, -1])
    img = model.decode_image(np.array([[0.5]]), np.array([[1.0, 0.0]])).data
    # hidden = relu([0.5, 1.0]); logits = [1.0, -1.0]
    np.testing.assert_allclose(img, [[1 / (1 + np.exp(-1.0)), 1 / (1 + np.exp(1.0))]])
    lbl = model.decode_label(np.array([[0.0, 1.0]])).data
    np.testing.assert_allclose(lbl, [[1 / (1 + np.exp(1.0)), 1 / (1 + np.exp(-2.0))]])


# --- training forward -------------------------------------------------------------

def test_unpaired_batch_has_only_image_self_path():
    model = DMVAE(ModelConfig(), np.random.default_rng(0))
    b = batch(paired=[False] * 4)
    bundle = model.forward_train(b, NoiseSource(np.random.default_rng(1), np.random.default_rng(2)))
    assert list(bundle.paths) == [("image", "self")]
    assert bundle.fused_shared is None


@pytest.mark.parametrize("kind", ["discrete", "continuous"])
def test_fully_paired_batch_populates_every_path(kind):
    model = DMVAE(ModelConfig(shared_kind=kind), np.random.default_rng(0))
    b = batch(n=2)
    bundle = model.forward_train(b, NoiseSource(np.random.default_rng(1), np.random.default_rng(2)))
    assert set(bundle.paths) == {(m, p) for m in ("image", "label")
                                 for p in ("self", "joint", "cross")}
    _, sh_img = model.encode_image(b.images)
    sh_lbl = model.encode_label(b.labels)
    if kind == "discrete":
        expected = poe_concrete([sh_img, sh_lbl])
        np.testing.assert_array_equal(bundle.fused_shared.logits.data, expected.logits.data)
    else:
        expected = poe_gaussian([sh_img, sh_lbl], include_standard_prior=True)
        np.testing.assert_array_equal(bundle.fused_shared.mu.data, expected.mu.data)
        np.testing.assert_array_equal(bundle.fused_shared.logvar.data, expected.logvar.data)


def test_discrete_samples_lie_on_floored_simplex():
    model = DMVAE(ModelConfig(), np.random.default_rng(0))
    bundle = model.forward_train(batch(n=5, paired=[True, False, True, False, True]),
                                 NoiseSource(np.random.default_rng(1), np.random.default_rng(2)))
    for entry in bundle.paths.values():
        c = entry.shared_sample.coords.data
        assert np.all(c >= 1e-12)
        np.testing.assert_allclose(c.sum(axis=-1), 1.0, atol=1e-9)


def test_forward_is_deterministic_given_noise():
    model = DMVAE(ModelConfig(), np.random.default_rng(0))
    b = batch(n=3, paired=[True, False, True])

    def run():
        noise = NoiseSource(np.random.default_rng(5), np.random.default_rng(6))
        return model.forward_train(b, noise)

    a, c = run(), run()
    for key in a.paths:
        assert a.paths[key].recon.data.tobytes() == c.paths[key].recon.data.tobytes()


def test_finite_noise_exhaustion_is_reported():
    model = DMVAE(ModelConfig(), np.random.default_rng(0))
    with pytest.raises(NoiseExhausted):
        model.forward_train(batch(n=2), NoiseSource(np.zeros(5), np.zeros(100)))


def test_private_swap_leaves_label_decoder_unchanged():
    model = DMVAE(ModelConfig(), np.random.default_rng(0))
    b = batch(n=2)
    bundle = model.forward_train(b, NoiseSource(np.random.default_rng(1), np.random.default_rng(2)))
    joint = bundle.paths[("label", "joint")]
    zs = joint.shared_sample
    zp = bundle.private_sample.data
    swapped = zp[::-1]
    before_img = model.decode_image(zp, zs).data
    after_img = model.decode_image(swapped, zs).data
    assert not np.array_equal(before_img, after_img)
    # the label decoder takes no private input at all
    np.testing.assert_array_equal(model.decode_label(zs).data, joint.recon.data)


def test_state_dict_round_trip_and_errors():
    a = DMVAE(ModelConfig(), np.random.default_rng(0))
    b = DMVAE(ModelConfig(), np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    with pytest.raises(KeyError):
        b.load_state_dict({})
    bad = a.state_dict()
    bad["enc_image.w1"] = np.zeros((3, 3))
    with pytest.raises(T.ShapeError):
        b.load_state_dict(bad)


def test_init_is_bounded_by_fan_in():
    model = DMVAE(ModelConfig(), np.random.default_rng(0))
    assert np.abs(model.params["enc_image.w1"].data).max() <= 1 / np.sqrt(784)
    assert np.abs(model.params["dec_label.w2"].data).max() <= 1 / np.sqrt(256)


def test_multilabel_shared_code_is_per_attribute_binary():
    cfg = ModelConfig(image_dim=6, label_classes=3, shared_dim=3, multilabel=True, hidden_dim=4)
    model = DMVAE(cfg, np.random.default_rng(0))
    _, sh = model.encode_image(np.zeros((2, 6)))
    assert sh.logits.shape == (2, 3, 2)
    code = model.shared_mode_code(np.array([[1, 0, 1]]))
    np.testing.assert_array_equal(code, [[0, 1, 1, 0, 0, 1]])
    labels = np.array([[1.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
    bundle = model.forward_train(BimodalBatch(np.zeros((2, 6)), labels, np.ones(2, bool)),
                                 NoiseSource(np.random.default_rng(1), np.random.default_rng(2)))
    assert bundle.paths[("label", "cross")].recon.shape == (2, 3)
    probs = model.predict_label_scores(np.zeros((2, 6)))
    assert probs.shape == (2, 3) and np.all((probs > 0) & (probs < 1))
