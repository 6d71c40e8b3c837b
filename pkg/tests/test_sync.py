import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from toa_rtls.errors import InvalidInputError, NumericalFailureError
from toa_rtls.linalg import mp_pinv
from toa_rtls.model import NetworkGeometry, ToaFrame, distance_vector, reduced_row_matrix
from toa_rtls.sync import (
    MeasurementBlock,
    assemble_block,
    brmp_update_full,
    brmp_update_reduced,
    cover,
    direct_lls_solve,
    init_sync,
    make_block,
    stack_blocks,
    theorem2_condition,
)
from toa_rtls.verify import random_sync_case


def run_stream(m, lam, stream, use_reduced=True):
    state = init_sync(m, lam)
    for sels, block in stream:
        if use_reduced and theorem2_condition(sels, state):
            state = brmp_update_reduced(state, block)
        else:
            state = cover(brmp_update_full(state, block), sels)
    return state


def test_init_sync():
    s = init_sync(3, 1.0)
    np.testing.assert_array_equal(s.delta_hat, np.zeros(3))
    np.testing.assert_array_equal(s.q_mat, np.eye(3))
    np.testing.assert_array_equal(s.r_mat, np.zeros((3, 3)))
    assert s.covered_set == () and s.t == 0
    s = init_sync(25, 0.8)
    assert s.delta_hat.shape == (25,) and s.q_mat.shape == s.r_mat.shape == (25, 25)


@pytest.mark.parametrize("m,lam", [(3, 0.0), (3, 1.5), (3, -0.2), (1, 1.0)])
def test_init_sync_rejects(m, lam):
    with pytest.raises(InvalidInputError):
        init_sync(m, lam)


def _geom2():
    return NetworkGeometry(np.array([[0.0, 0.0], [10.0, 0.0]]))


def test_assemble_block_examples():
    g = _geom2()
    p = np.array([3.0, 4.0])
    d = distance_vector(p, g)
    frame = ToaFrame(1, (d + np.array([4.0, 6.0]))[None, :])
    block = assemble_block(frame, [(0, 1)], [p], g)
    np.testing.assert_allclose(block.y_block, [-1.0, 1.0], atol=1e-12)
    frame0 = ToaFrame(1, d[None, :])
    np.testing.assert_allclose(assemble_block(frame0, [(0, 1)], [p], g).y_block, 0.0, atol=1e-12)


def test_assemble_block_stacks_in_agent_order():
    g = NetworkGeometry(np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]))
    frame = ToaFrame(1, np.ones((2, 3)))
    block = assemble_block(frame, [(0, 1, 2), (0, 2)], [np.ones(2), np.ones(2)], g)
    assert block.rows == 5
    np.testing.assert_allclose(block.a_block[:3], reduced_row_matrix((0, 1, 2), 3))
    np.testing.assert_allclose(block.a_block[3:], reduced_row_matrix((0, 2), 3))
    np.testing.assert_allclose(block.a_block.sum(axis=1), 0.0, atol=1e-12)
    with pytest.raises(InvalidInputError):
        assemble_block(frame, [(0, 1, 2)], [np.ones(2)], g)


def test_theorem2_condition_examples():
    s = init_sync(25, 0.8)
    assert not theorem2_condition([tuple(range(22))], s)
    s = cover(s, [tuple(range(25))])
    assert theorem2_condition([tuple(range(22)), tuple(range(3, 25))], s)
    s24 = cover(init_sync(25, 0.8), [tuple(range(24))])
    assert not theorem2_condition([tuple(range(2, 25))], s24)
    # size check: 12 anchors is not more than half of 25
    assert not theorem2_condition([tuple(range(12))], s)
    assert not theorem2_condition([], s)


def _orthonormal_block(seed, m=5, k=3):
    rng = np.random.default_rng(seed)
    s = tuple(range(k))
    a = reduced_row_matrix(s, m)
    y = a @ rng.normal(size=m)
    return s, MeasurementBlock(a, y, (s,))


def test_first_full_step_is_min_norm_solution():
    s, block = _orthonormal_block(0)
    state = brmp_update_full(init_sync(5, 1.0), block)
    np.testing.assert_allclose(state.delta_hat, mp_pinv(block.a_block) @ block.y_block, atol=1e-12)
    assert state.t == 1 and state.covered_set == ()


def test_repeated_block_does_not_move_estimate():
    s, block = _orthonormal_block(1)
    st1 = cover(brmp_update_full(init_sync(5, 1.0), block), [s])
    st2 = brmp_update_full(st1, block)
    np.testing.assert_allclose(st2.delta_hat, st1.delta_hat, atol=1e-12)


def test_three_step_sequence_matches_direct():
    rng = np.random.default_rng(42)
    m, lam = 6, 0.9
    blocks, sels_all = [], []
    for _ in range(3):
        sels = [tuple(sorted(rng.choice(m, size=4, replace=False).tolist())) for _ in range(2)]
        blocks.append(make_block(sels, [rng.normal(size=m) for _ in sels], m))
        sels_all.append(sels)
    state = run_stream(m, lam, list(zip(sels_all, blocks)))
    np.testing.assert_allclose(state.delta_hat, direct_lls_solve(blocks, lam), atol=1e-8)


def test_reduced_with_zero_r_keeps_estimate():
    s, block = _orthonormal_block(2)
    state = init_sync(5, 1.0)
    state = cover(state, [tuple(range(5))])
    out = brmp_update_reduced(state, block)
    np.testing.assert_array_equal(out.delta_hat, state.delta_hat)


def test_reduced_zero_innovation_keeps_estimate():
    m = 5
    s = (0, 1, 2, 3)
    a = reduced_row_matrix(s, m)
    rng = np.random.default_rng(3)
    st1 = cover(brmp_update_full(init_sync(m, 1.0), make_block([s], [rng.normal(size=m)], m)), [s])
    block = MeasurementBlock(a, a @ st1.delta_hat, (s,))
    out = brmp_update_reduced(st1, block)
    np.testing.assert_allclose(out.delta_hat, st1.delta_hat, atol=1e-14)


def test_direct_solve_examples():
    s, block = _orthonormal_block(4)
    np.testing.assert_allclose(direct_lls_solve([block], 1.0), mp_pinv(block.a_block) @ block.y_block)
    np.testing.assert_allclose(direct_lls_solve([block, block], 1.0), direct_lls_solve([block], 1.0), atol=1e-12)


def test_stack_blocks_scaling():
    s, block = _orthonormal_block(5)
    a, y = stack_blocks([block, block], 0.5)
    np.testing.assert_allclose(a[: block.rows], 2 * block.a_block)
    np.testing.assert_allclose(a[block.rows :], 4 * block.a_block)


def test_stack_blocks_overflow():
    s, block = _orthonormal_block(6)
    with pytest.raises(OverflowError):
        stack_blocks([block] * 2000, 0.5)
    with pytest.raises(InvalidInputError):
        stack_blocks([], 0.5)


def test_block_validation():
    state = init_sync(4, 1.0)
    with pytest.raises(InvalidInputError):
        brmp_update_full(state, MeasurementBlock(np.zeros((2, 3)), np.zeros(2), ()))
    with pytest.raises(InvalidInputError):
        brmp_update_full(state, MeasurementBlock(np.zeros((0, 4)), np.zeros(0), ()))
    with pytest.raises(InvalidInputError):
        brmp_update_reduced(state, MeasurementBlock(np.zeros((2, 4)), np.zeros(3), ()))


def test_gain_failure_raises_numerical_error():
    state = init_sync(3, 1.0)
    bad = state.__class__(**{**state.__dict__, "r_mat": -1e6 * np.eye(3)})
    a = reduced_row_matrix((0, 1, 2), 3)
    with pytest.raises(NumericalFailureError) as info:
        brmp_update_reduced(bad, MeasurementBlock(a, np.zeros(3), ((0, 1, 2),)))
    assert info.value.diagnostics["branch"] == "reduced"


def test_full_diagnostics():
    s, block = _orthonormal_block(7)
    diag = {}
    brmp_update_full(init_sync(5, 1.0), block, diagnostics=diag)
    assert diag["c_rank"] == 2 and diag["c_max"] > 0


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_recursion_matches_direct_solve(seed):
    m, lam, stream = random_sync_case(seed)
    state = run_stream(m, lam, stream)
    ref = direct_lls_solve([b for _, b in stream], lam)
    assert np.linalg.norm(state.delta_hat - ref) <= 1e-7 * (1 + np.linalg.norm(ref))


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_reduced_step_matches_full_when_condition_holds(seed):
    m, lam, stream = random_sync_case(seed)
    state = init_sync(m, lam)
    for sels, block in stream:
        diag = {}
        full = brmp_update_full(state, block, diagnostics=diag)
        if theorem2_condition(sels, state):
            red = brmp_update_reduced(state, block)
            assert diag["c_max"] <= 1e-9
            for x, y in [(red.delta_hat, full.delta_hat), (red.q_mat, full.q_mat), (red.r_mat, full.r_mat)]:
                np.testing.assert_allclose(x, y, atol=1e-9, rtol=0)
        state = cover(full, sels)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_min_norm_support(seed):
    m, lam, stream = random_sync_case(seed)
    state = run_stream(m, lam, stream)
    outside = [i for i in range(m) if i not in state.covered_set]
    assert np.all(state.delta_hat[outside] == 0.0) or np.abs(state.delta_hat[outside]).max() <= 1e-12
    assert abs(state.delta_hat[list(state.covered_set)].sum()) <= 1e-8
    np.testing.assert_allclose(state.r_mat, state.r_mat.T, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_block_size_bound(seed):
    m, lam, stream = random_sync_case(seed)
    n = len(stream[0][0])
    assert all(b.rows <= n * m for _, b in stream)


def test_long_run_with_forgetting_stays_finite():
    # lam < 1 amplifies R by 1/lam^2 per step; round-off outside the row
    # space must not accumulate
    rng = np.random.default_rng(9)
    m = 25
    state = init_sync(m, 0.8)
    for t in range(600):
        sels = [tuple(sorted(rng.choice(m, size=22, replace=False).tolist())) for _ in range(4)]
        block = make_block(sels, [rng.normal(size=m) for _ in sels], m)
        if theorem2_condition(sels, state):
            state = brmp_update_reduced(state, block)
        else:
            state = cover(brmp_update_full(state, block), sels)
    assert np.all(np.isfinite(state.delta_hat))
    assert abs(state.delta_hat.sum()) < 1e-8
