import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from uad import losses as L
from uad.bevgeo import rotate_traj
from uad.netcore import LatentDistribution, NumericError

D = torch.float64


def dist(mean, scale):
    return LatentDistribution(torch.as_tensor(mean, dtype=D), torch.as_tensor(scale, dtype=D))


def test_spat_examples_and_oracle():
    assert L.l_spat(torch.tensor([1e-9, 1 - 1e-9], dtype=D), [0, 1]).item() < 1e-6
    assert L.l_spat(torch.full((4,), 0.5, dtype=D), [1, 1, 1, 1]).item() == pytest.approx(math.log(2), abs=1e-15)
    rng = np.random.default_rng(0)
    p, y = rng.uniform(0.01, 0.99, 40), rng.integers(0, 2, 40)
    oracle = sum(-(yi * math.log(pi) + (1 - yi) * math.log(1 - pi)) for pi, yi in zip(p, y)) / 40
    assert abs(L.l_spat(torch.as_tensor(p), y).item() - oracle) < 1e-12
    assert math.isfinite(L.l_spat(torch.tensor([0.0, 1.0], dtype=D), [1, 0]).item())


def test_drm_examples():
    a = dist(np.zeros((3, 4)), np.ones((3, 4)))
    assert L.l_drm([a, a], [a, a]).item() == 0.0
    assert L.l_drm([dist(np.ones((3, 4)), np.ones((3, 4)))], [a]).item() == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(L.InvariantError):
        L.l_drm([dist(np.zeros(2), [1.0, 0.0])], [dist(np.zeros(2), np.ones(2))])
    with pytest.raises(ValueError):
        L.l_drm([a], [])


def test_drm_nonnegative_on_random_pairs():
    rng = np.random.default_rng(1)
    qm, pm = rng.normal(0, 2, (2, 10_000))
    qs, ps = np.exp(rng.normal(0, 1, (2, 10_000)))
    kl = L.gaussian_kl(*(torch.as_tensor(v) for v in (qm, qs, pm, ps)))
    assert bool((kl >= -1e-15).all())


def test_drm_matches_monte_carlo():
    rng = np.random.default_rng(2)
    for _ in range(20):
        qm, pm = rng.normal(0, 1, 2)
        qs, ps = np.exp(rng.normal(0, 0.5, 2))
        x = rng.normal(qm, qs, 100_000)
        logq = -0.5 * ((x - qm) / qs) ** 2 - math.log(qs)
        logp = -0.5 * ((x - pm) / ps) ** 2 - math.log(ps)
        mc = float(np.mean(logq - logp))
        closed = L.l_drm([dist([qm], [qs])], [dist([pm], [ps])]).item()
        assert abs(closed - mc) <= 0.02 * closed + 2e-3


def test_drm_stop_prior_blocks_prior_gradient():
    pm = torch.zeros(3, dtype=D, requires_grad=True)
    qm = torch.ones(3, dtype=D, requires_grad=True)
    s = torch.ones(3, dtype=D)
    L.l_drm([LatentDistribution(qm, s)], [LatentDistribution(pm, s)], stop_prior=True).backward()
    assert pm.grad is None and qm.grad.abs().sum() > 0


def test_imi_examples_and_shape_check():
    g = torch.randn(6, 2, dtype=D)
    assert L.l_imi(g.clone(), g).item() == 0.0
    assert L.l_imi(g + 0.5, g).item() == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        L.l_imi(g, g[:5])


@pytest.mark.parametrize("x,label", [(-1.5, L.LEFT), (0.3, L.STRAIGHT), (1.2, L.RIGHT), (-1.2, L.LEFT), (1.19, L.STRAIGHT)])
def test_direction_label_boundaries(x, label):
    assert L.direction_label(np.array([[x, 4.0]]), 1.2).tolist() == [label]


@given(hnp.arrays(np.float64, (6, 2), elements=st.floats(-20, 20)), hnp.arrays(np.float64, 6, elements=st.floats(-50, 50)))
def test_direction_label_ignores_longitudinal(traj, ys):
    moved = traj.copy()
    moved[:, 1] = ys
    assert np.array_equal(L.direction_label(traj), L.direction_label(moved))


def test_dir_examples_and_oracle():
    labels = torch.tensor([0, 1, 2])
    assert L.l_dir(torch.eye(3, dtype=D), labels).item() < 1e-6
    assert L.l_dir(torch.full((3, 3), 1 / 3, dtype=D), labels).item() == pytest.approx(math.log(3), abs=1e-12)
    rng = np.random.default_rng(3)
    p = rng.dirichlet(np.ones(3), 6)
    y = rng.integers(0, 3, 6)
    oracle = -sum(math.log(p[i, y[i]]) for i in range(6)) / 6
    assert abs(L.l_dir(torch.as_tensor(p), y).item() - oracle) < 1e-12


def test_cons_zero_for_exact_rotations():
    base = torch.randn(6, 2, dtype=D)
    aug = {r: rotate_traj(base, r) for r in (90, 180, 270)}
    assert L.l_cons(base, aug).item() == 0.0


def test_cons_hand_arithmetic():
    T = 4
    base = torch.tensor([[1.0, 0.0]] * T, dtype=D)
    aug = {r: rotate_traj(base, r) for r in (90, 270)}
    aug[180] = torch.tensor([[-1.0, -0.2]] * T, dtype=D)
    assert abs(L.l_cons(base, aug).item() - 0.2 / 3) < 1e-12
    with pytest.raises(ValueError):
        L.l_cons(base, {90: base})


def test_cons_matches_direct_summation():
    rng = np.random.default_rng(4)
    base = rng.normal(size=(6, 2))
    aug = {r: rng.normal(size=(6, 2)) for r in (90, 180, 270)}
    inverse = {90: np.array([[0, 1], [-1, 0]]), 180: -np.eye(2), 270: np.array([[0, -1], [1, 0]])}
    oracle = 0.0
    for t in range(6):
        for r in (90, 180, 270):
            back = inverse[r] @ aug[r][t]
            oracle += abs(back[0] - base[t, 0]) + abs(back[1] - base[t, 1])
    oracle /= 6 * 3
    got = L.l_cons(torch.as_tensor(base), {r: torch.as_tensor(v) for r, v in aug.items()}).item()
    assert abs(got - oracle) < 1e-12


def test_cons_gradient_reaches_both_branches():
    base = torch.randn(6, 2, dtype=D, requires_grad=True)
    aug = {r: torch.randn(6, 2, dtype=D, requires_grad=True) for r in (90, 180, 270)}
    L.l_cons(base, aug).backward()
    assert base.grad.abs().sum() > 0 and all(a.grad.abs().sum() > 0 for a in aug.values())


def test_total_examples():
    zero = {k: torch.tensor(0.0, dtype=D) for k in L.COMPONENTS}
    assert L.total_loss(zero).total == 0.0
    ones = {k: torch.tensor(1.0, dtype=D) for k in L.COMPONENTS}
    rep = L.total_loss(ones)
    assert rep.total == pytest.approx(6.1, abs=1e-12)
    assert rep.total_tensor.item() == pytest.approx(6.1, abs=1e-12)
    with pytest.raises(NumericError):
        L.total_loss({"l_imi": torch.tensor(float("inf"))})
    with pytest.raises(L.InvariantError):
        L.total_loss({"l_imi": torch.tensor(-1.0)})


def test_total_is_exact_weighted_sum():
    rng = np.random.default_rng(5)
    for _ in range(50):
        vals = rng.uniform(0, 5, 5)
        w = tuple(rng.uniform(0, 3, 5))
        rep = L.total_loss({k: torch.tensor(v, dtype=D) for k, v in zip(L.COMPONENTS, vals)}, w)
        assert abs(rep.total - float(np.dot(w, vals))) < 1e-12


def test_disabled_component_removes_its_gradient():
    x = torch.ones(3, dtype=D, requires_grad=True)
    y = torch.ones(3, dtype=D, requires_grad=True)
    comps = {"l_imi": (x**2).mean(), "l_spat": (y**2).mean()}
    rep = L.total_loss(comps, (0.0, 0.1, 1.0, 2.0, 1.0))
    rep.total_tensor.backward()
    assert y.grad is None and x.grad.norm() > 0
    assert rep.l_spat == 1.0 and rep.total == 1.0


def test_report_line_format():
    rep = L.total_loss({"l_imi": torch.tensor(0.25)})
    assert rep.as_line(3) == "step=3 l_spat=0 l_drm=0 l_imi=0.25 l_dir=0 l_cons=0 total=0.25"
