import numpy as np
import pytest

from cgxsim.model import FilterRules, LayerKind, filter_layers
from cgxsim.synthetic import SyntheticGradients, bundled_model, resnet_like, transformer_like


def test_transformer_like_shape():
    layers = transformer_like()
    sizes = [l.element_count for l in layers]
    assert len({l.name for l in layers}) == len(layers)
    assert sizes[0] == 16384 * 128 and max(sizes) == sizes[0]
    assert sum(l.kind is LayerKind.EMBEDDING for l in layers) == 2
    assert sum(s <= 512 for s in sizes) > len(layers) // 2


def test_resnet_like_widths_grow():
    convs = [l for l in resnet_like() if "conv" in l.name]
    assert convs[-1].element_count == 512 * 512 * 9


def test_unknown_bundled_model():
    with pytest.raises(ValueError, match="transformer-like"):
        bundled_model("vgg")


def test_stream_is_seeded():
    layers, _ = bundled_model("transformer-like")
    comp, _ = filter_layers(layers, FilterRules())
    a = SyntheticGradients(comp[:3], seed=4).step(7)
    b = SyntheticGradients(comp[:3], seed=4).step(7)
    c = SyntheticGradients(comp[:3], seed=5).step(7)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["embed.weight"], c["embed.weight"])


def test_embedding_rows_are_sparse():
    layers = transformer_like(vocab=1000, d_model=16, blocks=1)
    g = SyntheticGradients(layers, active_rows=0.1).step(0)["embed.weight"].reshape(-1, 128)
    active = np.any(g != 0, axis=1).mean()
    assert 0.02 < active < 0.25


def test_window_length():
    stream = SyntheticGradients(transformer_like(vocab=100, d_model=8, blocks=1))
    assert len(list(stream.window(3, 4))) == 4
