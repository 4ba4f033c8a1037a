import json

import numpy as np
import pytest

from conftr import autodiff as ad
from conftr import models
from conftr.autodiff import Tensor
from conftr.errors import ContractError, FormatError, ShapeError

from gradcheck import numeric_grad, rel_err


def test_linear_init_shapes():
    p = models.init(models.ModelSpec("linear", 4, 3), seed=0)
    assert [w.shape for w in p.weights] == [(4, 3)]
    np.testing.assert_array_equal(p.biases[0].data, np.zeros(3))


def test_init_is_deterministic():
    spec = models.ModelSpec("mlp", 5, 3, (4, 4))
    a, b = models.init(spec, 7), models.init(spec, 7)
    for x, y in zip(a.tensors(), b.tensors()):
        assert np.array_equal(x.data, y.data)


def test_truncated_normal_std():
    w = models.truncated_normal(np.random.default_rng(0), (100_000,), 1 / np.sqrt(100))
    assert w.std() == pytest.approx(0.1, rel=0.05)
    # truncation bound is two sigmas of the underlying (pre-truncation) normal
    assert np.abs(w).max() <= 2 * 0.1 / 0.8796256610342398 + 1e-12


def test_spec_validation():
    with pytest.raises(ContractError):
        models.ModelSpec("linear", 4, 3, (5,))
    with pytest.raises(ContractError):
        models.ModelSpec("mlp", 4, 3)
    with pytest.raises(ContractError):
        models.ModelSpec("linear", 4, 1)


def test_zero_params_give_zero_logits():
    p = models.init(models.ModelSpec("mlp", 3, 2, (4,)), 0)
    for t in p.tensors():
        t.data = np.zeros_like(t.data)
    np.testing.assert_array_equal(models.forward(p, np.ones((2, 3))).data, np.zeros((2, 2)))


def test_linear_identity():
    p = models.init(models.ModelSpec("linear", 3, 3), 0)
    p.weights[0].data = np.eye(3)
    out = models.forward(p, np.array([[1.0, 0.0, 0.0]]))
    np.testing.assert_array_equal(out.data, [[1.0, 0.0, 0.0]])


def test_linear_forward_is_affine():
    rng = np.random.default_rng(1)
    p = models.init(models.ModelSpec("linear", 6, 4), 2)
    x = rng.normal(size=(5, 6))
    expected = x @ p.weights[0].data + p.biases[0].data
    np.testing.assert_array_equal(models.forward(p, x).data, expected)
    np.testing.assert_array_equal(models.predict_logits(p, x), expected)


def test_forward_is_permutation_equivariant():
    rng = np.random.default_rng(2)
    p = models.init(models.ModelSpec("mlp", 4, 3, (5, 5)), 3)
    x = rng.normal(size=(7, 4))
    perm = rng.permutation(7)
    np.testing.assert_allclose(models.forward(p, x[perm]).data, models.forward(p, x).data[perm])


def test_first_layer_gradient():
    rng = np.random.default_rng(3)
    p = models.init(models.ModelSpec("mlp", 4, 3, (6,)), 4)
    x = rng.normal(size=(5, 4))
    w0 = p.weights[0]
    (got,) = ad.grad(models.forward(p, x).sum(), [w0])

    def f(w):
        saved = w0.data
        w0.data = w
        out = models.forward(p, x).sum().item()
        w0.data = saved
        return out

    (want,) = numeric_grad(f, [w0.data.copy()])
    assert rel_err(got, want) < 1e-6


def test_forward_shape_error():
    p = models.init(models.ModelSpec("linear", 3, 2), 0)
    with pytest.raises(ShapeError):
        models.forward(p, np.ones((2, 4)))


class TestAccuracy:
    def test_one_hot(self):
        labels = np.array([2, 0, 1])
        assert models.accuracy(np.eye(3)[labels], labels) == 1.0

    def test_ties_go_to_lowest_index(self):
        labels = np.array([0, 1, 2, 0])
        assert models.accuracy(np.zeros((4, 3)), labels) == 0.5

    def test_matches_loop(self):
        rng = np.random.default_rng(4)
        logits = rng.integers(0, 3, size=(50, 4)).astype(float)
        labels = rng.integers(0, 4, size=50)
        hits = 0
        for row, y in zip(logits, labels):
            best = 0
            for k in range(1, 4):
                if row[k] > row[best]:
                    best = k
            hits += best == y
        assert models.accuracy(logits, labels) == hits / 50

    def test_empty(self):
        with pytest.raises(ContractError):
            models.accuracy(np.zeros((0, 3)), np.zeros(0, dtype=int))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = models.init(models.ModelSpec("mlp", 3, 4, (5,)), 9)
        path = tmp_path / "ckpt.json"
        models.save_checkpoint(p, path)
        q = models.load_checkpoint(path)
        assert q.spec == p.spec
        for a, b in zip(p.tensors(), q.tensors()):
            assert np.array_equal(a.data, b.data)

    def test_document_layout(self):
        doc = models.to_checkpoint(models.init(models.ModelSpec("linear", 2, 2), 0))
        assert doc["format_version"] == 1
        assert set(doc["layers"][0]) == {"weights", "bias"}
        assert json.loads(json.dumps(doc)) == doc

    def test_shape_mismatch(self):
        doc = models.to_checkpoint(models.init(models.ModelSpec("linear", 2, 2), 0))
        doc["spec"]["input_dim"] = 3
        with pytest.raises(FormatError):
            models.from_checkpoint(doc)

    def test_bad_version(self):
        doc = models.to_checkpoint(models.init(models.ModelSpec("linear", 2, 2), 0))
        doc["format_version"] = 99
        with pytest.raises(FormatError):
            models.from_checkpoint(doc)
