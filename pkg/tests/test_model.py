import numpy as np
import pytest

from dbda import model as Mdl
from dbda import tensor as T
from dbda.gradcheck import check


def test_build_is_deterministic():
    cfg = Mdl.ModelConfig(num_classes=6, aspp_rates=(1, 2, 4))
    assert Mdl.build(cfg, seed=7).checksum() == Mdl.build(cfg, seed=7).checksum()
    assert Mdl.build(cfg, seed=7).checksum() != Mdl.build(cfg, seed=8).checksum()


def test_deeplab_rates_accepted_at_512():
    cfg = Mdl.ModelConfig(num_classes=6, aspp_rates=Mdl.DEEPLAB_ASPP_RATES, input_size=512)
    model = Mdl.build(cfg, seed=0)
    assert {f"aspp{r}.weight" for r in (6, 12, 18, 24)} <= set(model.params)


def test_deeplab_rates_rejected_on_small_input():
    cfg = Mdl.ModelConfig(aspp_rates=Mdl.DEEPLAB_ASPP_RATES, input_size=32)
    with pytest.raises(ValueError, match="exceeds half"):
        Mdl.build(cfg, seed=0)


def test_single_branch_on_8x8():
    cfg = Mdl.ModelConfig(num_classes=3, aspp_rates=(1,), block_dilations=(1, 1), input_size=8)
    out = Mdl.forward(Mdl.build(cfg, 0), np.zeros((1, 3, 8, 8)))
    assert out.shape == (1, 3, 8, 8)


@pytest.mark.parametrize(
    "kwargs",
    [dict(num_classes=1), dict(aspp_rates=()), dict(aspp_rates=(0,)), dict(aspp_rates=(2, 2))],
)
def test_invalid_configs(kwargs):
    with pytest.raises(ValueError):
        Mdl.build(Mdl.ModelConfig(**kwargs), seed=0)


def test_output_shape():
    cfg = Mdl.ModelConfig(num_classes=6, input_size=64)
    out = Mdl.forward(Mdl.build(cfg, 1), np.random.default_rng(0).uniform(size=(2, 3, 64, 64)))
    assert out.shape == (2, 6, 64, 64)
    assert np.all(np.isfinite(out.data))


@pytest.mark.parametrize("b,h,w", [(1, 8, 8), (3, 16, 24), (2, 32, 32)])
def test_output_shape_contract(b, h, w):
    model = Mdl.build(Mdl.ModelConfig(num_classes=5), 0)
    assert Mdl.forward(model, np.zeros((b, 3, h, w))).shape == (b, 5, h, w)


def test_forward_rejects_bad_input():
    model = Mdl.build(Mdl.ModelConfig(), 0)
    with pytest.raises(T.ShapeError):
        Mdl.forward(model, np.zeros((1, 4, 8, 8)))
    with pytest.raises(T.ShapeError, match="divisible"):
        Mdl.forward(model, np.zeros((1, 3, 9, 8)))


def test_zero_head_gives_uniform_softmax():
    model = Mdl.build(Mdl.ModelConfig(num_classes=4), 3)
    for name, p in model.params.items():
        if name.startswith("aspp"):
            p.data = np.zeros_like(p.data)
    x = np.random.default_rng(1).uniform(size=(2, 3, 16, 16))
    probs = T.softmax_channel(Mdl.forward(model, x)).data
    np.testing.assert_allclose(probs, 0.25, atol=1e-15)


def test_mean_logit_gradient_first_layer():
    cfg = Mdl.ModelConfig(num_classes=4, width=8, input_size=16)
    model = Mdl.build(cfg, 2)
    x = np.random.default_rng(2).uniform(size=(2, 3, 16, 16))
    names = list(model.params)

    def mean_logit(w0):
        params = dict(model.params)
        params["block0.weight"] = w0
        return T.mean(Mdl.forward(Mdl.SegModel(cfg, params), x))

    res = check("first_layer", mean_logit, [model.params["block0.weight"].data], np.random.default_rng(0))
    assert res.coords >= 100 and names
    assert res.max_rel_err < 1e-4


def test_no_dead_parameters_at_init():
    cfg = Mdl.ModelConfig(num_classes=4)
    model = Mdl.build(cfg, 0)
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(2, 3, 32, 32))
    labels = rng.integers(0, 4, size=(2, 32, 32))
    p = T.softmax_channel(Mdl.forward(model, x))
    from dbda.losses import cross_entropy

    T.backward(cross_entropy(p, labels).tensor)
    for name, param in model.params.items():
        assert param.grad is not None and np.any(param.grad != 0), name


def test_save_load_roundtrip(tmp_path):
    cfg = Mdl.ModelConfig(num_classes=4)
    model = Mdl.build(cfg, 5)
    Mdl.save(model, tmp_path / "m.ckpt")
    loaded = Mdl.load(tmp_path / "m.ckpt", expected=cfg)
    assert loaded.config == cfg
    assert loaded.checksum() == model.checksum()


def test_load_architecture_mismatch(tmp_path):
    Mdl.save(Mdl.build(Mdl.ModelConfig(num_classes=4), 0), tmp_path / "m.ckpt")
    with pytest.raises(ValueError, match="num_classes: checkpoint 4 vs config 6"):
        Mdl.load(tmp_path / "m.ckpt", expected=Mdl.ModelConfig(num_classes=6))


def test_predict_matches_argmax():
    model = Mdl.build(Mdl.ModelConfig(num_classes=3), 0)
    x = np.random.default_rng(3).uniform(size=(5, 3, 16, 16))
    with T.no_grad():
        expected = Mdl.forward(model, x).data.argmax(axis=1)
    np.testing.assert_array_equal(Mdl.predict(model, x, batch=2), expected)
