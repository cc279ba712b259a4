import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from uad.bevgeo import BevGrid, build_partition
from uad.model import UADModel, command_index, masked_mean
from uad.netcore import ShapeError, grad_check

D = torch.float64


def make_model(shape=(8, 8), theta=30, C=8, T=3, seed=0, **kw):
    torch.manual_seed(seed)
    part = build_partition(BevGrid(*shape, 1.0), theta)
    return UADModel(part, channels=C, horizon=T, plan_hidden=8, **kw).double(), part


def zero_(*modules):
    with torch.no_grad():
        for m in modules:
            for p in m.parameters():
                p.zero_()


@settings(max_examples=15)
@given(
    st.sampled_from([(6, 6), (8, 8), (4, 8)]),
    st.sampled_from([30, 45, 90]),
    st.integers(2, 8),
    st.integers(1, 4),
    st.integers(1, 3),
)
def test_shape_contract(shape, theta, C, T, B):
    model, part = make_model(shape, theta, C, T)
    out = model(torch.randn(B, *shape, 4, dtype=D), torch.zeros(B, dtype=torch.long))
    assert out.objectness.shape == (B, part.K)
    assert out.trajectory.shape == (B, T, 2) and out.direction.shape == (B, T, 3)
    assert len(out.rollout.priors) == len(out.rollout.posteriors) == T
    assert torch.allclose(out.direction.sum(-1), torch.ones(B, T, dtype=D), atol=1e-6)
    assert bool(((out.objectness > 0) & (out.objectness < 1)).all())
    for d in (*out.rollout.priors, *out.rollout.posteriors):
        assert d.mean.shape == (B, part.K, C) and bool((d.scale > 0).all())


def test_encoder_is_pointwise():
    model, _ = make_model()
    zero = make_model()[0]
    zero_(zero.enc1, zero.enc2)
    x = torch.randn(1, 8, 8, 4, dtype=D)
    assert not zero.encode_scene(x).any()
    x[0, 5, 1] = x[0, 2, 3]
    f = model.encode_scene(x)
    assert torch.equal(f[0, 5, 1], f[0, 2, 3])
    with pytest.raises(ShapeError):
        model.encode_scene(torch.zeros(1, 8, 6, 4, dtype=D))


def test_encoder_grad_check_at_16():
    model, _ = make_model((16, 16), 30, C=4)
    x = torch.randn(1, 16, 16, 4, dtype=D)
    params = {n: p for n, p in model.named_parameters() if n.startswith("enc")}
    rep = grad_check(lambda: model.encode_scene(x).pow(2).mean(), params)
    assert rep.max_rel_error < 1e-4


def test_sector_locality():
    model, part = make_model((8, 8), 30)
    fa = model.gather_angular(model.encode_scene(torch.randn(1, 8, 8, 4, dtype=D)))
    q, _ = model.angular_perceive(fa)
    j = 4
    bumped = fa.clone()
    bumped[0, j] += torch.randn(part.N, model.C, dtype=D) * torch.as_tensor(part.valid[j], dtype=D).unsqueeze(-1)
    q2, _ = model.angular_perceive(bumped)
    changed = (q2 != q).any(-1)[0]
    assert changed.tolist() == [k == j for k in range(part.K)]


def test_single_valid_row_determines_query():
    model, part = make_model((8, 8), 30)
    fa = model.gather_angular(model.encode_scene(torch.randn(1, 8, 8, 4, dtype=D)))
    valid = model.valid.clone()
    valid[0] = False
    valid[0, 0] = True
    model.valid = valid
    q, _ = model.angular_perceive(fa * valid.unsqueeze(-1))
    p = model.perceive_attn.params()
    row = fa[0, 0, 0]
    expect = model.angular_queries[0] + (row @ p["w_v"]) @ p["w_o"] + p["b_o"]
    assert torch.allclose(q[0, 0], expect, atol=1e-14)


def test_identical_sectors_share_queries_and_scores():
    model, part = make_model((8, 8), 90)
    fa = torch.zeros(1, part.K, part.N, model.C, dtype=D)
    fa[..., :] = torch.randn(model.C, dtype=D)
    valid = torch.ones(part.K, part.N, dtype=torch.bool)
    model.valid = valid
    with torch.no_grad():
        model.angular_queries[:] = model.angular_queries[0]
    q, s = model.angular_perceive(fa)
    assert torch.allclose(q[0], q[0, :1].expand_as(q[0]), atol=1e-14)
    assert torch.allclose(s[0], s[0, :1].expand_as(s[0]), atol=1e-14)


def test_masked_perception_matches_rows_removed():
    """Each sector attended separately over only its real rows."""
    model, part = make_model((8, 8), 30)
    fa = model.gather_angular(model.encode_scene(torch.randn(2, 8, 8, 4, dtype=D)))
    q, _ = model.angular_perceive(fa)
    att = model.perceive_attn
    for b in range(2):
        for k in range(part.K):
            rows = fa[b, k][torch.as_tensor(part.valid[k])]
            one = att(model.angular_queries[k : k + 1], rows, rows, torch.ones(len(rows), dtype=torch.bool))
            assert torch.allclose(q[b, k], one[0], atol=1e-12)


def test_zero_gru_halves_queries_each_step():
    model, _ = make_model(T=4)
    zero_(model.gru)
    fa = model.gather_angular(model.encode_scene(torch.randn(1, 8, 8, 4, dtype=D)))
    q0, _ = model.angular_perceive(fa)
    ro = model.dreaming_rollout(q0, fa)
    for t, q in enumerate(ro.queries, start=1):
        assert torch.allclose(q, q0 * 0.5**t, atol=1e-15)


def test_single_step_rollout_has_no_pseudo_observation():
    model, _ = make_model(T=1)
    fa = model.gather_angular(model.encode_scene(torch.randn(1, 8, 8, 4, dtype=D)))
    q0, _ = model.angular_perceive(fa)
    ro = model.dreaming_rollout(q0, fa)
    assert len(ro.priors) == 1 and len(ro.observations) == 1
    assert ro.observations[0] is fa
    with pytest.raises(ValueError):
        model.dreaming_rollout(q0, fa, steps=0)


def test_later_steps_use_pseudo_observations():
    model, _ = make_model(T=3)
    fa = model.gather_angular(model.encode_scene(torch.randn(1, 8, 8, 4, dtype=D)))
    q0, _ = model.angular_perceive(fa)
    ro = model.dreaming_rollout(q0, fa)
    assert not torch.equal(ro.observations[1], fa)
    assert not ro.observations[2][0][~model.valid].any()


def test_zero_plan_head_and_command_invariance():
    model, _ = make_model()
    x = torch.randn(2, 8, 8, 4, dtype=D)
    zero_(model.plan1, model.plan2)
    assert not model(x, torch.tensor([0, 1])).trajectory.any()
    model, _ = make_model()
    with torch.no_grad():
        model.plan1.weight[model.C : model.C + 3] = 0
    outs = [model(x, torch.full((2,), c)).trajectory for c in range(3)]
    assert torch.equal(outs[0], outs[1]) and torch.equal(outs[1], outs[2])
    with pytest.raises(ValueError):
        model(x, torch.tensor([3, 0]))
    with pytest.raises(ValueError):
        command_index("reverse")


def test_plan_grad_check():
    model, _ = make_model()
    x = torch.randn(1, 8, 8, 4, dtype=D)
    target = torch.randn(1, 3, 2, dtype=D)
    params = {n: p for n, p in model.named_parameters() if n.startswith(("plan", "ego"))}
    rep = grad_check(lambda: (model(x, torch.tensor([2])).trajectory - target).abs().mean(), params)
    assert rep.passed, rep.per_param


def test_ego_status_input_is_required_when_enabled():
    model, _ = make_model(ego_status=True)
    x = torch.randn(1, 8, 8, 4, dtype=D)
    with pytest.raises(ValueError):
        model(x, torch.tensor([0]))
    out = model(x, torch.tensor([0]), torch.tensor([[3.0, 0.1]], dtype=D))
    assert out.trajectory.shape == (1, 3, 2)


def test_masked_mean_counts_valid_rows():
    g = torch.tensor([[[1.0, 2.0], [3.0, 4.0], [100.0, 100.0]]], dtype=D)
    assert masked_mean(g, torch.tensor([[True, True, False]])).tolist() == [[2.0, 3.0]]
    assert not masked_mean(g, torch.zeros(1, 3, dtype=torch.bool)).any()


def test_parameter_init_is_seeded():
    a, _ = make_model(seed=3)
    b, _ = make_model(seed=3)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    assert np.isclose(float(a.angular_queries[:, 2:].detach().std()), 0.02, rtol=0.6)


def test_bearing_channels_point_along_each_sector():
    model, part = make_model((8, 8), 30)
    q = model.angular_queries.detach()[:, :2].numpy()
    assert np.allclose(np.hypot(q[:, 0], q[:, 1]), 1.0)
    # sector 3 spans 90-120 degrees clockwise from forward: centered at 105
    assert np.allclose(q[3], [math.sin(math.radians(105)), math.cos(math.radians(105))])
    # a quarter turn counterclockwise carries the bearing of sector k onto sector k - 3
    assert np.allclose(np.roll(q, 3, axis=0), q @ np.array([[0.0, 1.0], [-1.0, 0.0]]), atol=1e-6)
    plain = UADModel(part, channels=8, horizon=3, plan_hidden=8, bearing_init=False)
    assert float(plain.angular_queries.detach().abs().max()) < 0.2
