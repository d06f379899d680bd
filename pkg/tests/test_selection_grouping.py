import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptmil.errors import DataError, IndexOutOfRange
from promptmil.grouping import group, group_indices, group_size
from promptmil.selection import SelectionResult, apply_selection, select_bag, zero_shot_classify
from promptmil.store import Bag, PromptEntry, PromptSet


def tissue_prompts(dim=9):
    eye = np.eye(dim)
    return PromptSet([PromptEntry(f"t{i}", "", eye[i], "tissue") for i in range(9)])


def test_zero_shot_keeps_stroma_rows():
    prompts = tissue_prompts()
    text = np.eye(9)[[7, 0, 7, 3, 7]] + 0.01
    res = zero_shot_classify(text, prompts, "t7")
    assert res.kept_indices.tolist() == [0, 2, 4]
    assert res.per_instance_class.tolist() == [7, 0, 7, 3, 7]


def test_ties_go_to_lowest_prompt():
    prompts = PromptSet([PromptEntry("a", "", np.array([1.0, 0.0])), PromptEntry("b", "", np.array([0.0, 1.0]))])
    res = zero_shot_classify(np.array([[1.0, 1.0]]), prompts, "b")
    assert res.per_instance_class.tolist() == [0]
    assert res.kept_indices.size == 0


def test_apply_selection_preserves_rows():
    bag = Bag("b", 0, np.arange(10.0).reshape(5, 2), coords=np.arange(10).reshape(5, 2))
    out = apply_selection(bag, SelectionResult(np.array([1, 3]), np.zeros(5, int), np.zeros(5)))
    assert out.instances.tolist() == [[2.0, 3.0], [6.0, 7.0]]
    assert out.coords.tolist() == [[2, 3], [6, 7]]
    assert not out.selection_fallback


def test_empty_selection_falls_back_to_whole_bag():
    bag = Bag("b", 0, np.ones((5, 2)))
    out = apply_selection(bag, SelectionResult(np.array([], int), np.zeros(5, int), np.zeros(5)))
    assert out.n == 5 and out.selection_fallback


def test_selection_index_out_of_range():
    with pytest.raises(IndexOutOfRange):
        apply_selection(Bag("b", 0, np.ones((2, 2))), SelectionResult(np.array([2]), np.zeros(2, int), np.zeros(2)))


def test_selection_is_idempotent(rng):
    prompts = tissue_prompts()
    bag = Bag("b", 1, rng.normal(size=(30, 4)), text=rng.normal(size=(30, 9)))
    once, _ = select_bag(bag, prompts, "t7")
    twice, res = select_bag(once, prompts, "t7")
    assert res.kept_indices.tolist() == list(range(once.n))
    assert np.array_equal(twice.instances, once.instances)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3), st.integers(0, 19))
def test_selection_argmax_scale_invariant(seed, c, row):
    rng = np.random.default_rng(seed)
    text = rng.normal(size=(20, 9))
    scaled = text.copy()
    scaled[row] *= c
    prompts = tissue_prompts()
    a = zero_shot_classify(text, prompts, 7).per_instance_class
    b = zero_shot_classify(scaled, prompts, 7).per_instance_class
    assert np.array_equal(a, b)


# -- grouping -----------------------------------------------------------------

@pytest.mark.parametrize("n,beta,k", [(10, 0.3, 3), (2, 0.1, 1), (20, 0.25, 5), (7, 1.0, 7), (1, 0.5, 1)])
def test_group_size(n, beta, k):
    assert group_size(n, beta) == k


def test_group_size_rejects_bad_beta():
    for beta in (0.0, 1.5, -0.1):
        with pytest.raises(DataError):
            group_size(10, beta)


def test_matching_instance_leads_its_group():
    prompts = np.eye(4)
    x = -np.ones((6, 4))
    x[:, :] += np.random.default_rng(0).uniform(0, 0.1, size=(6, 4))
    x[3] = [-1.0, -1.0, 1.0, -1.0]
    groups = group(x, prompts, 0.5)
    assert groups[2].member_indices[0] == 3


def test_group_contract(rng):
    x = rng.normal(size=(13, 5))
    prompts = rng.normal(size=(4, 5))
    groups = group(x, prompts, 0.3)
    assert len(groups) == 4
    for g in groups:
        assert len(g.member_indices) == 3
        assert np.array_equal(g.features, x[g.member_indices])


def test_beta_one_takes_everything(rng):
    x = rng.normal(size=(9, 3))
    for g in group(x, rng.normal(size=(4, 3)), 1.0):
        assert sorted(g.member_indices.tolist()) == list(range(9))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.floats(1e-3, 1e3), min_size=15, max_size=15),
       st.floats(0.05, 1.0))
def test_grouping_row_scale_invariant(seed, scales, beta):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(15, 6))
    prompts = rng.normal(size=(4, 6))
    a = group(x, prompts, beta)
    b = group(x * np.array(scales)[:, None], prompts, beta)
    for ga, gb in zip(a, b):
        assert ga.member_indices.tolist() == gb.member_indices.tolist()
    assert all(len(g.member_indices) == group_size(15, beta) for g in a)


def test_group_indices_overlap_allowed():
    sim = np.array([[0.9, 0.9, 0.0, 0.0], [0.1, 0.1, 0.9, 0.9], [0.0, 0.0, 0.1, 0.1]])
    idx = group_indices(sim, 0.34)
    assert [i.tolist() for i in idx] == [[0], [0], [1], [1]]
