import itertools

import pytest

from rlvr_lab.env import SUM_END, SUM_PLUS, enumerate_correct, make_task, verify


def test_sum_grammar_layout():
    task = make_task("SumGrammar", targets=[5])
    assert task.vocab_size == 13
    assert task.max_response_length == 4
    assert task.terminal_token == SUM_END


def test_sum_grammar_verdicts():
    task = make_task("SumGrammar", targets=[5])
    assert verify(task, 5, [2, SUM_PLUS, 3, SUM_END]).reward == 1
    assert verify(task, 5, [2, SUM_PLUS, 4, SUM_END]).reward == 0
    # missing terminal
    assert verify(task, 5, [2, SUM_PLUS, 3]).reward == 0
    with pytest.raises(ValueError):
        verify(task, 4, [2, SUM_PLUS, 2, SUM_END])


@pytest.mark.parametrize("t", range(10))
def test_sum_grammar_enumeration_counts(t):
    task = make_task("SumGrammar", targets=[t])
    seqs = enumerate_correct(task, t)
    # ordered digit pairs summing to t
    assert len(seqs) == sum(1 for a in range(10) for b in range(10) if a + b == t)
    assert len(seqs) == t + 1
    if t == 0:
        assert seqs == {(0, SUM_PLUS, 0, SUM_END)}


def test_branch_chain_construction_deterministic():
    a = make_task("BranchChain", depth=3, branching=6, n_correct=4, seed=7)
    b = make_task("BranchChain", depth=3, branching=6, n_correct=4, seed=7)
    paths = enumerate_correct(a, 0)
    assert paths == enumerate_correct(b, 0)
    assert len(paths) == 4 and all(len(p) == 3 for p in paths)
    c = make_task("BranchChain", depth=3, branching=6, n_correct=4, seed=8)
    assert enumerate_correct(c, 0) != paths


def test_branch_chain_membership():
    task = make_task("BranchChain", depth=3, branching=4, n_correct=8, seed=1)
    paths = enumerate_correct(task, 0)
    assert len(paths) == 8
    assert verify(task, 0, next(iter(sorted(paths)))).reward == 1


def test_branch_chain_saturated():
    task = make_task("BranchChain", depth=2, branching=4, n_correct=16, seed=0)
    assert len(enumerate_correct(task, 0)) == 16
    assert all(verify(task, 0, s).reward == 1 for s in itertools.product(range(4), repeat=2))


@pytest.mark.parametrize("family,params", [
    ("BranchChain", dict(depth=2, branching=3, n_correct=10)),
    ("SumGrammar", dict(targets=[])),
    ("SumGrammar", dict(targets=[10])),
    ("Nope", {}),
])
def test_make_task_errors(family, params):
    with pytest.raises(ValueError):
        make_task(family, **params)


@pytest.mark.parametrize("task", [
    make_task("SumGrammar", targets=[0, 3, 9]),
    make_task("BranchChain", depth=3, branching=5, n_correct=7, seed=3, n_prompts=2),
])
def test_verify_iff_enumerated_exhaustive(task):
    V, L = task.vocab_size, task.max_response_length
    for pid in task.prompts:
        correct = enumerate_correct(task, pid)
        for length in range(1, L + 1):
            for seq in itertools.product(range(V), repeat=length):
                r = verify(task, pid, seq).reward
                assert r == (seq in correct)
                assert verify(task, pid, seq).reward == r
