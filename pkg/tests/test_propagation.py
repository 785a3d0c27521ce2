import numpy as np
import pytest

from spnkit.errors import ContractError, DimensionError
from spnkit.fdcheck import check_gradient
from spnkit.propagation import (
    Direction,
    ConnectionKind,
    GateTensor,
    GATE_PREV,
    GATE_SAME,
    GATE_NEXT,
    apply_boundary,
    boundary_mask,
    check_boundary_zeros,
    integrate_max,
    integrate_max_backward,
    propagate_direction,
    propagate_direction_cached,
    propagate_direction_backward,
    random_gates,
    spn_forward,
    spn_backward,
    step_matrix,
)

ONE = ConnectionKind.ONE_WAY
THREE = ConnectionKind.THREE_WAY


def dir_gates(h, w, c, kind, fill=0.0, dtype=np.float64):
    return np.full((h, w, c, kind.gates_per_direction), fill, dtype=dtype)


def test_one_way_frozen_2x2():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
    g = dir_gates(2, 2, 1, ONE)
    g[:, 1, 0, 0] = 0.5
    h = propagate_direction(x, g, Direction.LEFT_TO_RIGHT, ONE)
    np.testing.assert_allclose(h[:, :, 0], [[1.0, 1.5], [3.0, 3.5]])


def test_one_way_frozen_rtl_1x3():
    x = np.array([[1.0, 2.0, 3.0]])[:, :, None]
    g = dir_gates(1, 3, 1, ONE)
    g[0, 0, 0, 0] = 0.5
    g[0, 1, 0, 0] = 0.5
    h = propagate_direction(x, g, Direction.RIGHT_TO_LEFT, ONE)
    np.testing.assert_allclose(h[0, :, 0], [1.75, 2.5, 3.0])


def test_one_way_frozen_ttb_btt_3x1():
    x = np.array([[1.0], [2.0], [3.0]])[:, :, None]
    g = dir_gates(3, 1, 1, ONE)
    g[1:, 0, 0, 0] = 0.5
    h = propagate_direction(x, g, Direction.TOP_TO_BOTTOM, ONE)
    np.testing.assert_allclose(h[:, 0, 0], [1.0, 1.5, 2.25])
    g2 = dir_gates(3, 1, 1, ONE)
    g2[:2, 0, 0, 0] = 0.5
    h2 = propagate_direction(x, g2, Direction.BOTTOM_TO_TOP, ONE)
    np.testing.assert_allclose(h2[:, 0, 0], [1.75, 2.5, 3.0])


def test_three_way_frozen_2x2():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
    g = dir_gates(2, 2, 1, THREE)
    g[0, 1, 0, GATE_SAME] = 0.2
    g[0, 1, 0, GATE_NEXT] = 0.3
    g[1, 1, 0, GATE_PREV] = 0.1
    g[1, 1, 0, GATE_SAME] = 0.4
    h = propagate_direction(x, g, Direction.LEFT_TO_RIGHT, THREE)
    np.testing.assert_allclose(h[:, 0, 0], [1.0, 3.0])
    np.testing.assert_allclose(h[:, 1, 0], [2.1, 3.3])


def test_three_way_frozen_ttb_neighbors():
    # vertical scans read left/same/right columns of the previous row
    x = np.array([[1.0, 2.0], [0.0, 0.0]])[:, :, None]
    g = dir_gates(2, 2, 1, THREE)
    g[1, 0, 0, GATE_SAME] = 0.2
    g[1, 0, 0, GATE_NEXT] = 0.3
    g[1, 1, 0, GATE_PREV] = 0.4
    g[1, 1, 0, GATE_SAME] = 0.1
    h = propagate_direction(x, g, Direction.TOP_TO_BOTTOM, THREE)
    np.testing.assert_allclose(h[1, :, 0], [0.8, 0.6])


def test_zero_gates_identity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 5, 3))
    for kind in (ONE, THREE):
        for d in Direction:
            g = dir_gates(4, 5, 3, kind)
            h = propagate_direction(x, g, d, kind)
            np.testing.assert_array_equal(h, x)


def test_constant_input_is_fixed_point_for_any_gates():
    # holds with no stability projection at all: coefficients sum to one
    rng = np.random.default_rng(1)
    for kind in (ONE, THREE):
        for d in Direction:
            g = random_gates(5, 6, 2, kind, rng, low=-0.8, high=0.8)
            x = np.full((5, 6, 2), 2.25)
            h = propagate_direction(x, g[:, :, :, d, :], d, kind)
            np.testing.assert_allclose(h, 2.25, atol=1e-12)


def test_full_retention_one_way():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 6, 1))
    g = dir_gates(3, 6, 1, ONE)
    g[:, 1:, :, 0] = 1.0
    h = propagate_direction(x, g, Direction.LEFT_TO_RIGHT, ONE)
    for t in range(6):
        np.testing.assert_allclose(h[:, t], x[:, 0])


def test_boundary_contract_raises():
    x = np.zeros((3, 3, 1))
    g = dir_gates(3, 3, 1, ONE)
    g[:, 0, 0, 0] = 0.5  # first scan column for LTR must stay zero
    with pytest.raises(ContractError):
        propagate_direction(x, g, Direction.LEFT_TO_RIGHT, ONE)
    g3 = dir_gates(3, 3, 1, THREE)
    g3[0, 1, 0, GATE_PREV] = 0.1  # top row has no upper diagonal neighbor
    with pytest.raises(ContractError):
        propagate_direction(x, g3, Direction.LEFT_TO_RIGHT, THREE)


def test_gate_tensor_validation():
    with pytest.raises(DimensionError):
        GateTensor(np.zeros((2, 2, 1, 3, 1)), ONE)
    bad = np.zeros((2, 2, 1, 4, 1))
    bad[:, 0, 0, Direction.LEFT_TO_RIGHT, 0] = 0.3
    with pytest.raises(ContractError):
        GateTensor(bad, ONE)
    ok = GateTensor(apply_boundary(np.full((2, 2, 1, 4, 1), 0.5), ONE), ONE)
    assert ok.height == 2 and ok.channels == 1


def test_boundary_mask_counts():
    m = boundary_mask(4, 5, THREE)
    assert m.shape == (4, 5, 4, 3)
    # horizontal: first column masks 3 slots on 4 rows, plus top/bottom rows
    ltr = m[:, :, Direction.LEFT_TO_RIGHT, :]
    assert ltr[:, 0, :].all()
    assert ltr[0, :, GATE_PREV].all()
    assert ltr[3, :, GATE_NEXT].all()
    assert not ltr[1:3, 1:, GATE_SAME].any()
    ttb = m[:, :, Direction.TOP_TO_BOTTOM, :]
    assert ttb[0, :, :].all()
    assert ttb[:, 0, GATE_PREV].all()
    assert ttb[:, 4, GATE_NEXT].all()


def test_impulse_cone_three_way():
    h_, w_ = 7, 5
    x = np.zeros((h_, w_, 1))
    x[3, 0, 0] = 1.0
    g = apply_boundary(np.full((h_, w_, 1, 4, 3), 1.0 / 3.0), THREE)
    h = propagate_direction(x, g[:, :, :, Direction.LEFT_TO_RIGHT, :],
                            Direction.LEFT_TO_RIGHT, THREE)
    for t in range(w_):
        for i in range(h_):
            if abs(i - 3) <= t:
                assert h[i, t, 0] > 0.0
            else:
                assert h[i, t, 0] == 0.0
    np.testing.assert_allclose(h[2:5, 1, 0], 1.0 / 3.0, atol=1e-15)
    assert h[1, 1, 0] == 0.0


def test_dtype_parity_f32_f64():
    rng = np.random.default_rng(3)
    x64 = rng.standard_normal((6, 7, 2))
    g64 = random_gates(6, 7, 2, THREE, rng, high=0.3)
    out64, _ = spn_forward(x64, g64, THREE, units=2)
    out32, _ = spn_forward(x64.astype(np.float32), g64.astype(np.float32),
                           THREE, units=2)
    assert out32.dtype == np.float32
    np.testing.assert_allclose(out32, out64, atol=1e-5)


def test_step_matrix_frozen():
    line = np.array([[0.0, 0.2, 0.3], [0.1, 0.4, 0.0]])
    w = step_matrix(line, THREE)
    np.testing.assert_allclose(w, [[0.2, 0.3], [0.1, 0.4]])
    d = step_matrix(np.array([[0.7], [0.2]]), ONE)
    np.testing.assert_allclose(d, [[0.7, 0.0], [0.0, 0.2]])


def test_integrate_max_tie_break():
    stack = np.zeros((4, 1, 2, 1))
    stack[:, 0, 0, 0] = [1.0, 3.0, 3.0, 2.0]
    stack[:, 0, 1, 0] = [5.0, 5.0, 5.0, 5.0]
    out, winner = integrate_max(stack)
    assert out[0, 0, 0] == 3.0 and winner[0, 0, 0] == 1
    assert out[0, 1, 0] == 5.0 and winner[0, 1, 0] == 0


def test_integrate_max_backward_routes_single_winner():
    rng = np.random.default_rng(4)
    stack = rng.standard_normal((4, 3, 3, 2))
    out, winner = integrate_max(stack)
    grad = rng.standard_normal(out.shape)
    back = integrate_max_backward(grad, winner)
    np.testing.assert_allclose(back.sum(axis=0), grad)
    assert (np.count_nonzero(back, axis=0) <= 1).all()


def test_units_cascade():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((5, 5, 2))
    g = random_gates(5, 5, 2, THREE, rng, high=0.3)
    out2, _ = spn_forward(x, g, THREE, units=2)
    mid, _ = spn_forward(x, g, THREE, units=1)
    out2b, _ = spn_forward(mid, g, THREE, units=1)
    np.testing.assert_array_equal(out2, out2b)


def test_scan_backward_fd_input_and_gates():
    rng = np.random.default_rng(6)
    for kind in (ONE, THREE):
        for d in (Direction.LEFT_TO_RIGHT, Direction.BOTTOM_TO_TOP):
            x = rng.standard_normal((4, 5, 2))
            g = random_gates(4, 5, 2, kind, rng, high=0.8 / kind.gates_per_direction)
            gd = g[:, :, :, d, :].copy()
            w = rng.standard_normal(x.shape)
            h, cache = propagate_direction_cached(x, gd, d, kind)
            dx, dg = propagate_direction_backward(w, cache)

            res = check_gradient(
                lambda a: float((propagate_direction(a, gd, d, kind) * w).sum()),
                x, dx, rng=rng, num=40)
            assert res.checked == 40
            assert res.max_rel_err < 1e-6, str(res)

            valid = ~boundary_mask(4, 5, kind)[:, :, d, :]
            mask = np.broadcast_to(valid[:, :, None, :], gd.shape).copy()
            res = check_gradient(
                lambda a: float((propagate_direction(x, a, d, kind) * w).sum()),
                gd, dg, rng=rng, num=40, mask=mask)
            assert res.checked >= 30
            assert res.max_rel_err < 1e-6, str(res)


def test_scan_backward_zero_at_boundary_gates():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((4, 4, 1))
    g = random_gates(4, 4, 1, THREE, rng, high=0.2)
    for d in Direction:
        gd = g[:, :, :, d, :]
        _, cache = propagate_direction_cached(x, gd, d, THREE)
        _, dg = propagate_direction_backward(np.ones_like(x), cache)
        m = boundary_mask(4, 4, THREE)[:, :, d, :]
        assert (dg[np.broadcast_to(m[:, :, None, :], dg.shape)] == 0.0).all()


def test_spn_backward_fd_with_winner_signature():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((4, 4, 2))
    g = random_gates(4, 4, 2, THREE, rng, high=0.3)
    w = rng.standard_normal(x.shape)
    out, caches = spn_forward(x, g, THREE, units=2)
    dx, dg = spn_backward(w, caches)

    def loss_x(a):
        o, _ = spn_forward(a, g, THREE, units=2)
        return float((o * w).sum())

    def sig_x(a):
        _, cs = spn_forward(a, g, THREE, units=2)
        return tuple(c.winner.tobytes() for c in cs)

    res = check_gradient(loss_x, x, dx, rng=rng, num=50, signature=sig_x)
    assert res.checked >= 30
    assert res.max_rel_err < 1e-6, str(res)

    def loss_g(a):
        o, _ = spn_forward(x, a, THREE, units=2, check=False)
        return float((o * w).sum())

    def sig_g(a):
        _, cs = spn_forward(x, a, THREE, units=2, check=False)
        return tuple(c.winner.tobytes() for c in cs)

    valid = ~boundary_mask(4, 4, THREE)
    mask = np.broadcast_to(valid[:, :, None, :, :], g.shape).copy()
    res = check_gradient(loss_g, g, dg, rng=rng, num=50, mask=mask, signature=sig_g)
    assert res.checked >= 30
    assert res.max_rel_err < 1e-6, str(res)


def test_random_gates_respect_contract_and_projection():
    rng = np.random.default_rng(9)
    g = random_gates(5, 6, 2, THREE, rng, low=-2.0, high=2.0, project=True)
    check_boundary_zeros(g, THREE)
    assert np.abs(g).sum(axis=4).max() <= 1.0 + 1e-12


def test_single_line_grids():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((1, 5, 1))
    g = random_gates(1, 5, 1, THREE, rng, high=0.3)
    h = propagate_direction(x, g[:, :, :, 0, :], Direction.LEFT_TO_RIGHT, THREE)
    assert h.shape == x.shape
    xc = rng.standard_normal((5, 1, 1))
    gc = random_gates(5, 1, 1, ONE, rng, high=0.5)
    h2 = propagate_direction(xc, gc[:, :, :, 0, :], Direction.LEFT_TO_RIGHT, ONE)
    np.testing.assert_array_equal(h2, xc)
