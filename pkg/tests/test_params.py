"""Parameter tree walking and checkpoint serialization."""

from dataclasses import dataclass

import numpy as np
import pytest

from ebsg import autodiff as ad
from ebsg import params as pr


@dataclass
class Inner:
    w: ad.Tensor
    b: ad.Tensor


@dataclass
class Outer:
    inner: Inner
    scale: ad.Tensor
    label: str = "not a tensor"


def make_tree(rng):
    return Outer(
        inner=Inner(w=ad.tensor(rng.normal(size=(2, 3)), requires_grad=True),
                    b=ad.tensor(rng.normal(size=3), requires_grad=True)),
        scale=ad.tensor(rng.normal(size=()), requires_grad=False),
    )


def test_names_follow_declaration_order():
    tree = make_tree(np.random.default_rng(0))
    names = [name for name, _ in pr.named_tensors(tree)]
    assert names == ["inner.w", "inner.b", "scale"]


def test_trainable_filters_requires_grad():
    tree = make_tree(np.random.default_rng(1))
    assert [name for name, _ in pr.trainable_tensors(tree)] == ["inner.w", "inner.b"]


def test_round_trip_is_bit_exact():
    rng = np.random.default_rng(2)
    tree = make_tree(rng)
    saved = pr.tree_to_json(tree)
    other = make_tree(np.random.default_rng(3))
    pr.tree_load_json(other, saved)
    for (_, a), (_, b) in zip(pr.named_tensors(tree), pr.named_tensors(other)):
        assert a.value.tobytes() == b.value.tobytes()
        assert a.value.shape == b.value.shape


def test_load_keeps_tensor_identity():
    tree = make_tree(np.random.default_rng(4))
    before = tree.inner.w
    pr.tree_load_json(tree, pr.tree_to_json(make_tree(np.random.default_rng(5))))
    assert tree.inner.w is before  # values swapped inside the same Tensor


def test_load_rejects_unknown_name():
    tree = make_tree(np.random.default_rng(6))
    entries = pr.tree_to_json(tree)
    entries[0]["name"] = "inner.mystery"
    with pytest.raises(KeyError):
        pr.tree_load_json(tree, entries)


def test_load_rejects_shape_mismatch():
    tree = make_tree(np.random.default_rng(7))
    entries = pr.tree_to_json(tree)
    entries[0]["shape"] = [3, 2]
    with pytest.raises(ValueError):
        pr.tree_load_json(tree, entries)


def test_load_rejects_missing_parameters():
    tree = make_tree(np.random.default_rng(8))
    entries = pr.tree_to_json(tree)[:-1]
    with pytest.raises(KeyError):
        pr.tree_load_json(tree, entries)
