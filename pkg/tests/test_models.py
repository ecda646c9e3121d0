import numpy as np
import pytest

from mpq_forge import tensor as T
from mpq_forge.models import ZOO, accuracy, build_model, predict_logits
from mpq_forge.quantizer import ACTIVATIONS, WEIGHTS, QuantSpec, ScaleFactor


@pytest.mark.parametrize("name,shape,classes", [("mlp", (1, 8, 8), 10), ("cnn", (1, 8, 8), 10),
                                                ("contrast", (1, 4, 4), 16)])
def test_forward_shapes(name, shape, classes):
    model = build_model(name, shape, classes)
    out = model.forward(np.zeros((3,) + shape))
    assert out.shape == (3, classes)
    assert len(model.trace_shapes()) == len(model.layers)


def test_cnn_has_five_quantized_layers_and_exemption():
    model = build_model("cnn", (1, 8, 8), 10)
    assert model.layer_names == ["conv0", "conv1", "conv2", "conv3", "fc"]
    assert model.exempt_layers() == {0, 4}
    assert build_model("mlp", (1, 8, 8), 10).exempt_layers() == set()


def test_contrast_layers_equal_shape_different_spread():
    model = build_model("contrast", (1, 4, 4), 16, seed=0)
    wide, narrow = model.layers
    assert wide.weight.shape == narrow.weight.shape
    assert np.std(wide.weight.data) > 5 * np.std(narrow.weight.data)
    with pytest.raises(ValueError):
        build_model("contrast", (1, 4, 4), 10)


def test_unknown_model():
    with pytest.raises(ValueError):
        build_model("vgg", (1, 8, 8), 10)
    assert set(ZOO) == {"mlp", "cnn", "contrast"}


def test_input_shape_checked():
    with pytest.raises(T.ShapeError):
        build_model("mlp", (1, 8, 8), 10).forward(np.zeros((2, 1, 7, 7)))


def test_clone_and_state_are_independent():
    model = build_model("mlp", (1, 8, 8), 10, seed=1)
    twin = model.clone()
    twin.layers[0].weight.data += 1.0
    assert not np.array_equal(twin.layers[0].weight.data, model.layers[0].weight.data)
    model.load_state(twin.state())
    assert np.array_equal(twin.layers[0].weight.data, model.layers[0].weight.data)


def test_seeded_init_is_deterministic():
    a, b = build_model("cnn", (1, 8, 8), 10, seed=3), build_model("cnn", (1, 8, 8), 10, seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a.state().values(), b.state().values()))


def test_quantized_forward_uses_and_counts_scales():
    model = build_model("mlp", (1, 8, 8), 10, seed=0)
    x = np.random.default_rng(0).uniform(0, 1, (4, 1, 8, 8))
    pairs = [(ScaleFactor(0.1, l, QuantSpec(2, WEIGHTS)), ScaleFactor(0.2, l, QuantSpec(2, ACTIVATIONS)))
             for l in range(2)]
    with T.no_grad():
        full = model.forward(x).data
        quant = model.forward(x, pairs).data
    assert not np.allclose(full, quant)
    assert all(sf.uses == 1 for pair in pairs for sf in pair)
    with pytest.raises(ValueError):
        model.forward(x, pairs[:1])


def test_predict_and_accuracy():
    model = build_model("mlp", (1, 8, 8), 10, seed=0)
    x = np.random.default_rng(0).uniform(0, 1, (10, 1, 8, 8))
    logits = predict_logits(model, x, batch_size=3)
    assert logits.shape == (10, 10)
    with T.no_grad():
        assert np.allclose(logits, model.forward(x).data)
    assert accuracy(model, x, logits.argmax(axis=1)) == 1.0
