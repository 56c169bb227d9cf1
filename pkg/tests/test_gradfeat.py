import numpy as np
import pytest

from conftest import random_example
from gdig.errors import DegenerateInputError, FormatError, InputError, ShapeError
from gdig.gradfeat import (LayerSelector, batch_extract, extract, flatten_blocks, ids_path, read_cache,
                           split_blocks, write_cache)
from gdig.toylm import Example, ModelConfig, backward, init_params


def test_selector_presets():
    c = ModelConfig()
    assert LayerSelector.stride(c).layers == (0, 3)
    assert LayerSelector.final_only(c).layers == (4,)
    assert LayerSelector.parse("all", c).layers == (0, 1, 2, 3, 4)
    assert LayerSelector.parse("explicit:1,2", c).layers == (1, 2)
    assert LayerSelector.parse("stride:2", c).layers == (0, 2)
    assert LayerSelector.final_only(c).dim(c) == 259 * 32 + 259
    with pytest.raises(InputError):
        LayerSelector.explicit([7]).validate(c)
    with pytest.raises(InputError):
        LayerSelector.explicit([1, 1])
    with pytest.raises(InputError):
        LayerSelector.parse("every-other", c)


def test_extract_is_scaled_blocks(small_params, gen):
    sel = LayerSelector.explicit([0, 2])
    ex = random_example(gen, resp_len=5)
    g, _ = backward(small_params, ex)
    expected = flatten_blocks([g.layer_block(l) for l in sel.layers]) / 5
    np.testing.assert_array_equal(extract(small_params, ex, sel).values, expected)
    one = Example("one", ex.prompt_tokens, ex.response_tokens[:1])
    g1, _ = backward(small_params, one)
    np.testing.assert_array_equal(extract(small_params, one, sel).values,
                                  flatten_blocks([g1.layer_block(l) for l in sel.layers]))


def test_identical_examples_identical_vectors(small_params):
    a, b = Example("a", [1, 2, 3], [4, 5]), Example("b", [1, 2, 3], [4, 5])
    sel = LayerSelector.explicit([1])
    np.testing.assert_array_equal(extract(small_params, a, sel).values, extract(small_params, b, sel).values)


def test_single_token_block_is_kron(small_params, gen):
    ex = random_example(gen, resp_len=1)
    _, stats = backward(small_params, ex)
    sel = LayerSelector.explicit([1])
    v = extract(small_params, ex, sel).values
    np.testing.assert_allclose(v, np.kron(stats.a[1][0], stats.g[1][0]), atol=1e-15)


def test_split_inverts_flatten(small_params, small_config, gen):
    sel = LayerSelector.explicit([0, 2])
    v = extract(small_params, random_example(gen), sel).values
    np.testing.assert_array_equal(flatten_blocks(split_blocks(v, small_config, sel)), v)
    with pytest.raises(ShapeError):
        split_blocks(v[:-1], small_config, sel)


def test_empty_response_rejected(small_params):
    with pytest.raises(DegenerateInputError):
        extract(small_params, Example("e", [1], []), LayerSelector.explicit([0]))


def test_cache_roundtrip(tmp_path, small_params, gen):
    data = [random_example(gen, k) for k in range(10)]
    sel = LayerSelector.explicit([0, 2])
    path = tmp_path / "c.gdig"
    cache = batch_extract(small_params, data, sel, path)
    assert cache.count == 10 and cache.dim == sel.dim(small_params.config)
    back = read_cache(path)
    np.testing.assert_array_equal(back.values, cache.values)
    assert back.ids == cache.ids and back.selector == sel
    fresh = extract(small_params, data[3], sel).values.astype(np.float32)
    np.testing.assert_array_equal(back.values[3], fresh)
    assert path.read_bytes()[:4] == b"GDIG"
    assert ids_path(path).exists()


def test_cache_parallel_matches_serial(monkeypatch, small_params, gen):
    data = [random_example(gen, k) for k in range(6)]
    sel = LayerSelector.explicit([1])
    monkeypatch.setenv("GDIG_THREADS", "1")
    a = batch_extract(small_params, data, sel).values
    monkeypatch.setenv("GDIG_THREADS", "4")
    np.testing.assert_array_equal(a, batch_extract(small_params, data, sel).values)


def test_cache_corruption(tmp_path, small_params, gen):
    path = tmp_path / "c.gdig"
    batch_extract(small_params, [random_example(gen)], LayerSelector.explicit([0]), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        read_cache(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        read_cache(path)


def test_default_model_final_only_dim():
    c = ModelConfig()
    p = init_params(c, 0)
    v = extract(p, Example.from_text("x", "abc", "def"), LayerSelector.final_only(c))
    assert v.values.shape == (c.vocab_size * c.hidden_dim + c.vocab_size,)
    assert v.values.dtype == np.float64
