import csv
from dataclasses import replace

import numpy as np
import pytest

from bnrhn.cells import RhnParams, Variant, init_params, rhn_time_step
from bnrhn.diagnostics import (
    ContractError,
    GradCheckEvaluationError,
    GradTrace,
    clip_by_global_norm,
    gershgorin_discs,
    grad_check,
    grad_norm_trace,
    temporal_jacobian,
    unroll_cell,
    write_discs_csv,
    write_jacobian_csv,
    write_trace_csv,
)
from bnrhn.numkernel import ShapeError
from oracles import char_poly, eigenvalues


def pure_carry(F=4, F_in=3):
    p = init_params("rhn", F_in, F, depth=2, seed=0, init_scale=0.3)
    per = tuple(replace(d, b_T=np.full((1, F), -40.0), R_T=np.zeros((F, F))) for d in p.per_depth)
    per = (replace(per[0], W_T=np.zeros((F_in, F))),) + per[1:]
    return RhnParams(per_depth=per, variant=Variant.COUPLED)


def test_pure_carry_jacobian_is_identity():
    J = temporal_jacobian(pure_carry(), np.full((1, 4), 0.3), np.ones((1, 3)))
    np.testing.assert_allclose(J, np.eye(4), atol=1e-6)
    discs = gershgorin_discs(J)
    assert all(abs(d.center - 1) < 1e-6 and d.radius < 1e-6 for d in discs)


@pytest.mark.parametrize("variant", [Variant.COUPLED, Variant.DECOUPLED_BN])
def test_analytic_matches_finite_differences(variant):
    rng = np.random.default_rng(11)
    p = init_params("rhn", 3, 5, 3, variant, seed=4, init_scale=0.5, transform_bias=0.0, carry_bias=0.0, bn_gamma=1.0)
    if variant is Variant.DECOUPLED_BN:
        _, cache = rhn_time_step(rng.normal(size=(6, 5)), rng.normal(size=(6, 3)), p, "train")
        p = cache.params_after
    s, x = rng.normal(size=(1, 5)), rng.normal(size=(1, 3))
    a = temporal_jacobian(p, s, x, "analytic")
    n = temporal_jacobian(p, s, x, "finite_diff")
    assert np.max(np.abs(a - n)) < 1e-5


def test_pure_transform_without_recurrence_has_zero_jacobian():
    p = init_params("rhn", 2, 3, depth=1, seed=1, init_scale=0.5)
    d0 = replace(p.per_depth[0], R_H=np.zeros((3, 3)), R_T=np.zeros((3, 3)), b_T=np.full((1, 3), 40.0))
    p = RhnParams(per_depth=(d0,), variant=Variant.COUPLED)
    J = temporal_jacobian(p, np.ones((1, 3)), np.ones((1, 2)))
    assert np.max(np.abs(J)) < 1e-12


def test_callable_step_and_contract_errors():
    A = np.array([[0.5, 0.1], [0.0, 2.0]])
    J = temporal_jacobian(lambda s, x: s @ A.T, np.ones((1, 2)), None, "finite_diff")
    np.testing.assert_allclose(J, A, atol=1e-8)
    with pytest.raises(ContractError):
        temporal_jacobian(pure_carry(), np.ones((2, 4)), np.ones((2, 3)))
    with pytest.raises(ContractError):
        temporal_jacobian(lambda s, x: s, np.ones((1, 2)), None, "analytic")


def test_disc_examples():
    assert [(d.center, d.radius) for d in gershgorin_discs(np.eye(3))] == [(1.0, 0.0)] * 3
    discs = gershgorin_discs([[2.0, 1.0], [0.0, 3.0]])
    assert [(d.center, d.radius) for d in discs] == [(2.0, 1.0), (3.0, 0.0)]
    # 2x2 characteristic polynomial by hand: l^2 - 5l + 6 = (l - 2)(l - 3).
    assert char_poly([[2.0, 1.0], [0.0, 3.0]]) == [1.0, -5.0, 6.0]
    for lam in (2.0, 3.0):
        assert any(d.contains(lam) for d in discs)
    assert [(d.center, d.radius) for d in gershgorin_discs(np.zeros((2, 2)))] == [(0.0, 0.0)] * 2
    with pytest.raises(ShapeError):
        gershgorin_discs(np.ones((2, 3)))


def test_eigen_oracle_on_known_matrix():
    # Rotation by 90 degrees scaled by 2: eigenvalues +-2i.
    ev = sorted(eigenvalues([[0.0, -2.0], [2.0, 0.0]]), key=lambda z: z.imag)
    assert abs(ev[0] - (-2j)) < 1e-10 and abs(ev[1] - 2j) < 1e-10


@pytest.mark.parametrize("trial", range(100))
def test_eigenvalues_lie_in_disc_union(trial):
    rng = np.random.default_rng(trial)
    F = int(rng.integers(1, 7))
    J = rng.normal(size=(F, F))
    discs = gershgorin_discs(J)
    for lam in eigenvalues(J.tolist()):
        assert any(d.contains(lam, atol=1e-8) for d in discs)


def test_clip_examples():
    g = [np.array([[6.0, 8.0]])]
    clipped, norm = clip_by_global_norm(g, 5.0)
    assert norm == 10.0
    np.testing.assert_array_equal(clipped[0], [[3.0, 4.0]])
    same, norm = clip_by_global_norm([np.array([[3.0]])], 5.0)
    assert norm == 3.0 and same[0][0, 0] == 3.0
    zero, norm = clip_by_global_norm({"a": np.zeros((2, 2))}, 5.0)
    assert norm == 0.0 and not zero["a"].any()
    with pytest.raises(ValueError):
        clip_by_global_norm(g, 0.0)


def test_grad_check_constant_and_fault():
    x = [np.array([[1.0, 2.0]])]
    rep = grad_check(lambda p: 3.0, x, [np.zeros((1, 2))])
    assert rep.passed and rep.max_rel_err == 0.0
    f = lambda p: float((p[0] ** 3).sum())  # noqa: E731
    good = [3 * x[0] ** 2]
    assert grad_check(f, x, good).passed
    bad = grad_check(f, x, [1.1 * good[0]])
    assert not bad.passed and bad.max_rel_err > 0.05
    assert bad.worst[0] == 0


def test_grad_check_restores_params_and_subsamples():
    x = {"w": np.arange(6.0).reshape(2, 3)}
    before = x["w"].copy()
    rep = grad_check(lambda p: float((p["w"] ** 2).sum()), x, {"w": 2 * x["w"]}, max_coords=4, seed=3)
    assert rep.n_checked == 4 and rep.passed
    assert np.array_equal(x["w"], before)


def test_grad_check_non_finite():
    x = [np.array([[0.0]])]
    with pytest.raises(GradCheckEvaluationError) as err:
        grad_check(lambda p: float("nan"), x, [np.zeros((1, 1))])
    assert err.value.coordinate == (0, (0, 0))


def test_pure_carry_trace_is_flat():
    p = pure_carry()
    xs = [np.ones((1, 3))] * 6
    run = unroll_cell(p, np.full((1, 4), 0.2), xs)
    trace = grad_norm_trace(run, np.ones((1, 4)))
    assert len(trace.norms) == 6
    assert max(trace.norms) - min(trace.norms) < 1e-9


def test_explosion_detected_with_large_recurrent_weights():
    # Transform gate saturated open (t = 1, c = 0) and R_H = 3 I with tiny
    # states: the Jacobian is ~3 I, so norms grow by ~3 per step backward.
    F = 3
    p = init_params("rhn", 2, F, depth=1, seed=0, init_scale=0.0)
    d0 = replace(p.per_depth[0], R_H=3.0 * np.eye(F), b_T=np.full((1, F), 40.0))
    p = RhnParams(per_depth=(d0,), variant=Variant.COUPLED)
    run = unroll_cell(p, np.full((1, F), 1e-9), [np.zeros((1, 2))] * 5)
    norms = grad_norm_trace(run, np.ones((1, F))).norms
    growth = [b / a for a, b in zip(norms, norms[1:])]
    assert all(g == pytest.approx(3.0, rel=1e-6) for g in growth)


def test_zero_gradient_trace():
    run = unroll_cell(pure_carry(), np.ones((1, 4)), [np.ones((1, 3))] * 3)
    trace = grad_norm_trace(run, np.zeros((1, 4)))
    assert trace.norms == [0.0, 0.0, 0.0]
    assert GradTrace(norms=[2.0, 1.0]).ratio() == 2.0


def test_csv_writers(tmp_path):
    discs = gershgorin_discs([[2.0, 1.0], [0.5, 3.0]])
    write_discs_csv(discs, tmp_path / "discs.csv")
    rows = list(csv.reader(open(tmp_path / "discs.csv")))
    assert rows == [["row", "center", "radius"], ["0", "2.0", "1.0"], ["1", "3.0", "0.5"]]
    write_trace_csv(GradTrace(norms=[3.0, 2.0, 1.0]), tmp_path / "trace.csv")
    rows = list(csv.reader(open(tmp_path / "trace.csv")))
    assert rows[0] == ["t", "grad_norm"] and rows[1] == ["3", "3.0"] and rows[-1] == ["1", "1.0"]
    write_jacobian_csv(np.array([[0.1, 0.2]]).T @ np.ones((1, 2)), tmp_path / "j.csv")
    rows = list(csv.reader(open(tmp_path / "j.csv")))
    assert rows[0] == ["row", "col", "value"] and len(rows) == 5
