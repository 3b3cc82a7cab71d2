import numpy as np
import pytest
import torch

from semflow import flow_field as ff
from semflow.diffcore import ParamBlock, gradcheck, sinusoidal_embed
from semflow.feature_agg import FrameStack
from semflow.renderer import quadrature, sample_ray
from semflow.scene_synth import generate_scene

D = torch.float64
CFG = ff.FlowConfig(width=16, blocks=1, max_step=0.1)


@pytest.fixture(scope="module")
def stack():
    return FrameStack.from_scene(generate_scene("balloon", 0), D)


def zero_params(feature_dim=4, cfg=CFG):
    p = ff.make_flow_field(feature_dim, cfg, torch.Generator().manual_seed(0)).to(D)
    with torch.no_grad():
        for _, t in p.items():
            t.zero_()
    return p


def random_params(feature_dim=4, cfg=CFG, seed=1, scale=1.0):
    p = ff.make_flow_field(feature_dim, cfg, torch.Generator().manual_seed(seed)).to(D)
    with torch.no_grad():
        for _, t in p.items():
            t.mul_(scale)
    return p


def const_features(dim=4):
    def fn(points, frames):
        return torch.ones(*points.shape[:-1], dim, dtype=points.dtype), torch.ones(points.shape[:-1], dtype=torch.bool)
    return fn


def test_zero_weights_identity(stack):
    x = torch.tensor([[0.1, -0.2, 3.0], [0.5, 0.5, 2.0]], dtype=D)
    prev, nxt = ff.flow_step(zero_params(), torch.ones(2, 4, dtype=D), x, torch.tensor([3, 7]), stack, CFG)
    assert torch.equal(prev, x) and torch.equal(nxt, x)


def test_flow_step_matches_reference_loop(stack):
    p = random_params()
    g = torch.Generator().manual_seed(2)
    x = torch.rand(5, 3, generator=g, dtype=D) + torch.tensor([0, 0, 2.5], dtype=D)
    feat = torch.randn(5, 4, generator=g, dtype=D)
    t = torch.tensor([0, 3, 5, 8, 11])
    prev, nxt = ff.flow_step(p, feat, x, t, stack, CFG)
    for i in range(5):
        xe = sinusoidal_embed(stack.normalize_position(x[i]), 10)
        te = sinusoidal_embed(stack.normalize_time(t[i]).view(1), 4)
        h = torch.cat([feat[i], xe, te]) @ p["in.W"] + p["in.b"]
        r = torch.relu(torch.relu(h) @ p["block0.fc0.W"] + p["block0.fc0.b"])
        h = h + r @ p["block0.fc1.W"] + p["block0.fc1.b"]
        raw = h @ p["out.W"] + p["out.b"]
        off = torch.tanh(raw) * 0.1
        assert torch.allclose(prev[i], x[i] + off[:3], atol=1e-12)
        assert torch.allclose(nxt[i], x[i] + off[3:], atol=1e-12)


def test_flow_step_rejects_non_finite(stack):
    with pytest.raises(FloatingPointError):
        ff.flow_step(zero_params(), torch.ones(1, 4, dtype=D), torch.tensor([[np.nan, 0, 3]], dtype=D),
                     torch.tensor([1]), stack, CFG)


def test_flow_step_gradcheck(stack):
    p = random_params(seed=4)
    x = torch.tensor([[0.1, 0.2, 3.0], [-0.4, 0.1, 2.2]], dtype=D)
    target = torch.tensor([[0.15, 0.2, 3.0], [-0.3, 0.1, 2.3]], dtype=D)
    feat = torch.randn(2, 4, generator=torch.Generator().manual_seed(0), dtype=D)

    def f(blk):
        _, nxt = ff.flow_step(blk, feat, x, torch.tensor([2, 5]), stack, CFG)
        return ((nxt - target) ** 2).sum()

    rep = gradcheck(f, p, samples_per_tensor=8)
    assert rep.passed, rep.summary()


def test_window_zero_trajectory(stack):
    x = torch.tensor([[0.1, 0.2, 3.0]], dtype=D)
    traj = ff.build_trajectory(random_params(), const_features(), x, torch.tensor([4]), 0, stack, CFG)
    assert traj.positions.shape == (1, 1, 3) and traj.times.tolist() == [[4]]
    assert torch.equal(traj.positions[:, 0], x)


def test_zero_flow_window_one(stack):
    x = torch.tensor([[0.1, 0.2, 3.0], [0.3, -0.2, 2.5]], dtype=D)
    traj = ff.build_trajectory(zero_params(), const_features(), x, torch.tensor([5]), 1, stack, CFG)
    assert traj.times.tolist() == [[4, 5, 6], [4, 5, 6]]
    for r in range(3):
        assert torch.equal(traj.positions[:, r], x)


def test_anchor_identity_and_validity(stack):
    g = torch.Generator().manual_seed(0)
    x = torch.rand(6, 3, generator=g, dtype=D) * 2 - 1 + torch.tensor([0, 0, 3.0], dtype=D)
    t = torch.tensor([0, 1, 5, 10, 11, 6])
    traj = ff.build_trajectory(random_params(scale=3.0), const_features(), x, t, 2, stack, CFG)
    assert torch.equal(traj.row(0), x)
    assert traj.valid.tolist()[0] == [False, False, True, True, True]
    assert traj.valid.tolist()[4] == [True, True, True, False, False]
    assert torch.isfinite(traj.positions).all()


def test_chaining_requeries_features(stack):
    calls = []

    def fn(points, frames):
        calls.append(frames.clone())
        return points[..., :1].expand(*points.shape[:-1], 4).clone(), torch.ones(points.shape[:-1], dtype=torch.bool)

    x = torch.tensor([[0.1, 0.2, 3.0]], dtype=D)
    traj = ff.build_trajectory(random_params(), fn, x, torch.tensor([5]), 2, stack, CFG)
    queried = sorted(int(c.reshape(-1)[0]) for c in calls)
    assert queried == [3, 4, 5, 6, 7]
    # row features are those sampled at each row's own position
    assert torch.allclose(traj.features[0, :, 0], traj.positions[0, :, 0])


def test_chain_clamped_to_box(stack):
    cfg = ff.FlowConfig(width=16, blocks=1, max_step=5.0)
    p = zero_params(cfg=cfg)
    with torch.no_grad():
        p["out.b"].fill_(10.0)
    x = stack.box_max.unsqueeze(0) - 0.01
    traj = ff.build_trajectory(p, const_features(), x, torch.tensor([5]), 1, stack, cfg)
    assert bool(traj.out_of_box[0])
    assert (traj.positions <= stack.box_max + 1e-12).all()


def test_static_camera_identity_flow_is_zero(stack):
    still = FrameStack(stack.images, stack.R[:1].expand(12, 3, 3), stack.T[:1].expand(12, 3), stack.K,
                       stack.box_min, stack.box_max)
    B, M = 4, 8
    u = sample_ray(1.5, 5.0, M, batch=B, dtype=D)
    pixel = torch.tensor([[10.0, 20.0], [31.5, 31.5], [50.0, 3.0], [0.0, 63.0]], dtype=D)
    K = still.K[0]
    d = torch.stack([(pixel[:, 0] - K[2]) / K[0], (pixel[:, 1] - K[3]) / K[1], torch.ones(B, dtype=D)], -1)
    o = -(still.R[0].T @ still.T[0])
    pts = o + u[..., None] * (still.R[0].T @ d.T).T[:, None, :]
    traj = ff.build_trajectory(zero_params(), const_features(), pts, torch.tensor([3, 3, 3, 3]).view(-1, 1), 1,
                               still, CFG)
    w = quadrature(u, torch.rand(B, M, dtype=D), 3.5 / M).weights
    fwd, bwd = ff.render_optical_flow(w, traj, pixel, still)
    assert torch.allclose(fwd, torch.zeros_like(fwd), atol=1e-9)
    assert torch.allclose(bwd, torch.zeros_like(bwd), atol=1e-9)


def test_single_opaque_sample_flow(stack):
    # one sample carries all the weight; flow is that sample's projected displacement
    x0 = torch.tensor([0.2, 0.1, 3.0], dtype=D)
    x1 = torch.tensor([0.26, 0.05, 3.0], dtype=D)
    uv0, _, _ = stack.project(torch.tensor(4), x0)
    uv1, _, _ = stack.project(torch.tensor(5), x1)
    positions = torch.stack([x0, x0, x1], 0).view(1, 1, 3, 3).expand(1, 5, 3, 3).clone()
    traj = ff.Trajectory(positions, torch.tensor([3, 4, 5]).expand(1, 5, 3), torch.ones(1, 5, 3, dtype=torch.bool),
                         torch.zeros(1, 5, 3, 1, dtype=D), torch.ones(1, 5, 3, dtype=torch.bool),
                         torch.zeros(1, 5, dtype=torch.bool), 1)
    for scale in (1e-3, 1.0, 1e3):
        w = torch.zeros(1, 5, dtype=D)
        w[0, 2] = scale
        fwd, _ = ff.render_optical_flow(w, traj, uv0.unsqueeze(0), stack)
        assert torch.allclose(fwd[0], uv1 - uv0, atol=1e-6)


def test_integrate_displacement_dense_sum_oracle(stack):
    g = torch.Generator().manual_seed(3)
    B, M = 5, 7
    w = torch.rand(B, M, generator=g, dtype=D)
    pos = torch.rand(B, M, 3, generator=g, dtype=D) + torch.tensor([0, 0, 2.5], dtype=D)
    frame = torch.randint(0, 12, (B,), generator=g)
    pixel = torch.rand(B, 2, generator=g, dtype=D) * 64
    raw, _ = ff.integrate_displacement(w, pos, frame, pixel, stack, normalize=False)
    norm, _ = ff.integrate_displacement(w, pos, frame, pixel, stack, normalize=True)
    for b in range(B):
        acc = np.zeros(2)
        for i in range(M):
            uv, _, _ = stack.project(frame[b], pos[b, i])
            acc += float(w[b, i]) * (uv - pixel[b]).numpy()
        assert np.allclose(raw[b].numpy(), acc, atol=1e-6)
        assert np.allclose(norm[b].numpy(), acc / (float(w[b].sum()) + 1e-8), atol=1e-6)


def test_behind_camera_samples_excluded(stack):
    pos = torch.tensor([[[0.0, 0.0, 3.0], [0.0, 0.0, -3.0]]], dtype=D)
    w = torch.tensor([[0.5, 0.5]], dtype=D)
    pixel = torch.tensor([[0.0, 0.0]], dtype=D)
    flow, excluded = ff.integrate_displacement(w, pos, torch.tensor([0]), pixel, stack, normalize=True)
    uv, _, _ = stack.project(torch.tensor(0), pos[0, 0])
    assert bool(excluded[0]) and torch.allclose(flow[0], uv, atol=1e-6)


def test_render_flow_gradcheck(stack):
    g = torch.Generator().manual_seed(7)
    B, M = 2, 4
    feat = torch.randn(B, M, 4, generator=g, dtype=D)
    u = sample_ray(2.0, 4.0, M, batch=B, dtype=D)
    pts = torch.tensor([0.1, -0.1, 0.0], dtype=D) + u[..., None] * torch.tensor([0.05, 0.02, 1.0], dtype=D)
    pixel = torch.tensor([[33.0, 30.0], [34.0, 31.0]], dtype=D)
    p = random_params(seed=5)
    sig = ParamBlock("sig", {"raw": torch.randn(B, M, generator=g, dtype=D)})

    def f(blocks):
        flow, s = blocks
        traj = ff.build_trajectory(flow, lambda q, fr: (feat, torch.ones(q.shape[:-1], dtype=torch.bool)),
                                   pts, torch.tensor([4, 4]).view(-1, 1), 1, stack, CFG)
        w = quadrature(u, torch.nn.functional.softplus(s["raw"]), 0.5).weights
        fwd, bwd = ff.render_optical_flow(w, traj, pixel, stack)
        return (fwd ** 2).sum() + (bwd ** 3).sum()

    rep = gradcheck(f, [p, sig], samples_per_tensor=5)
    assert rep.passed, rep.summary()


def test_warp_ray_cases(stack):
    g = torch.Generator().manual_seed(0)
    x = torch.rand(3, 4, 3, generator=g, dtype=D) + torch.tensor([0, 0, 2.5], dtype=D)
    t = torch.tensor([2, 5, 9]).view(-1, 1)
    traj = ff.build_trajectory(random_params(scale=2.0), const_features(), x, t, 1, stack, CFG)
    assert torch.equal(ff.warp_ray(traj, t.view(-1)), x)
    tau = torch.tensor([1, 6, 9])
    warped = ff.warp_ray(traj, tau)
    for b in range(3):
        r = int(tau[b] - t[b]) + 1
        assert torch.equal(warped[b], traj.positions[b, :, r])
    with pytest.raises(ValueError):
        ff.warp_ray(traj, torch.tensor([4, 5, 9]))
    still = ff.build_trajectory(zero_params(), const_features(), x, t, 1, stack, CFG)
    assert torch.equal(ff.warp_ray(still, tau), x)
