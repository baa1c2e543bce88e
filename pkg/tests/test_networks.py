"""Network architecture contracts: shapes, bounds, causality, gradients."""

import numpy as np
import pytest

from physrefine import autodiff as ad
from physrefine.autodiff import Tensor
from physrefine.dynamics import EmptyContacts
from physrefine.networks import (
    BadWindowShape,
    CausalConvNetConfig,
    ContactForceNet,
    GainNet,
    PoseNet,
    TransNet,
    load_networks,
    save_networks,
)

CFG = CausalConvNetConfig(channels=12)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_config_validates_padding():
    with pytest.raises(ValueError):
        CausalConvNetConfig(pad_embed=2)
    with pytest.raises(ValueError):
        CausalConvNetConfig(pad_residual=3)


def test_posenet_output_shapes_and_bounds(rng):
    net = PoseNet(rng, 17, 40, CFG)
    x = rng.normal(0, 1, (3, 34, 10))
    ori, angles, probs = net(x)
    assert ori.shape == (3, 4)
    assert angles.shape == (3, 40)
    assert probs.shape == (3, 4)
    assert np.allclose(np.linalg.norm(ori.data, axis=1), 1.0, atol=1e-12)
    assert probs.data.min() >= 0.0 and probs.data.max() <= 1.0


def test_posenet_rejects_bad_window(rng):
    net = PoseNet(rng, 17, 40, CFG)
    with pytest.raises(BadWindowShape):
        net(rng.normal(0, 1, (1, 34, 9)))
    with pytest.raises(BadWindowShape):
        net(rng.normal(0, 1, (1, 30, 10)))


def test_transnet_output_and_sensitivity(rng):
    net = TransNet(rng, 17, CFG)
    prr = rng.normal(0, 1, (1, 51, 10))
    kc_a = rng.normal(0, 1, (1, 34, 10))
    kc_b = kc_a + 0.1
    out_a = net(np.concatenate([prr, kc_a], axis=1))
    out_b = net(np.concatenate([prr, kc_b], axis=1))
    assert out_a.shape == (1, 3)
    assert not np.allclose(out_a.data, out_b.data)


def test_window_causality_future_frames_do_not_matter(rng):
    # feeding the stream through sliding windows: output at t depends only on
    # frames <= t, so altering later frames never changes earlier outputs
    net = PoseNet(rng, 17, 40, CFG)
    stream = rng.normal(0, 1, (25, 34))
    altered = stream.copy()
    altered[12:] += rng.normal(0, 5.0, altered[12:].shape)

    def out_at(data, t):
        idx = np.clip(np.arange(t - 9, t + 1), 0, None)
        window = data[idx].T[None]
        ori, angles, probs = net(window)
        return np.concatenate([ori.data[0], angles.data[0], probs.data[0]])

    for t in range(0, 12):
        assert np.array_equal(out_at(stream, t), out_at(altered, t)), f"frame {t} leaked the future"
    assert not np.array_equal(out_at(stream, 15), out_at(altered, 15))


def test_gain_output_bounds_random_nets():
    kp_ini = np.linspace(10.0, 5000.0, 46)
    for seed in range(50):
        net_rng = np.random.default_rng(seed)
        net = GainNet(net_rng, 232, 46, hidden=24)
        # randomise every parameter including the zero-initialised heads
        for p in net.parameters():
            p.data = net_rng.normal(0, 2.0, p.data.shape)
        out = net(net_rng.normal(0, 3.0, 232), kp_ini)
        kp = out.kp.data
        alpha = out.alpha.data
        assert np.all(kp > 0.0) and np.all(kp < 2.0 * kp_ini)
        assert np.all(alpha >= -10.0) and np.all(alpha <= 10.0)
        assert np.all(out.s_g.data > 0.0) and np.all(out.s_g.data < 1.0)
        assert np.all(np.abs(out.s_f.data) <= 1.0)


def test_gain_head_formulas_hold_for_1e5_draws():
    # the bounds are carried entirely by the head nonlinearities
    rng = np.random.default_rng(1)
    raw = rng.normal(0, 50.0, 100000)
    kp_ini = 700.0
    s_g = np.clip(1.0 / (1.0 + np.exp(-raw)), 1e-12, 1.0 - 1e-12)
    kp = 2.0 * s_g * kp_ini
    alpha = 10.0 * np.tanh(raw)
    assert np.all((kp > 0.0) & (kp < 2.0 * kp_ini))
    assert np.all((alpha >= -10.0) & (alpha <= 10.0))


def test_gain_zero_init_matches_baseline(rng):
    net = GainNet(rng, 232, 46, hidden=16)
    kp_ini = np.full(46, 321.0)
    out = net(rng.normal(0, 1, 232), kp_ini)
    assert np.allclose(out.kp.data, kp_ini)
    assert np.allclose(out.alpha.data, 0.0)
    assert np.allclose(out.s_g.data, 0.5)


def test_contact_force_net_shapes_and_empty(rng):
    net = ContactForceNet(rng, 34, hidden=16)
    feats = rng.normal(0, 1, 34)
    for active in ([0], [1, 3], [0, 1, 2, 3]):
        lam = net(feats, active)
        assert lam.shape == (3 * len(active),)
    with pytest.raises(EmptyContacts):
        net(feats, [])


def test_networks_pass_parameter_gradient_checks(rng):
    cfg = CausalConvNetConfig(channels=6)
    net = PoseNet(rng, 4, 5, cfg)
    net.set_training(True)
    x0 = rng.normal(0, 1, (2, 8, 10))
    target = rng.normal(0, 1, (2, 5))

    def loss_with(param_holder, attr, wt):
        old = getattr(param_holder, attr)
        setattr(param_holder, attr, wt)
        ori, angles, probs = net(x0)
        out = ad.tsum((angles - target) ** 2.0) + ad.tsum(ori * ori) + ad.tsum(probs)
        setattr(param_holder, attr, old)
        return out

    checks = [
        (net.angle_net.embed.conv, "weight"),
        (net.angle_net.blocks[0].conv, "weight"),
        (net.angle_net.blocks[2].bn, "gamma"),
        (net.angle_net.head, "weight"),
        (net.ori_net.head, "weight"),
        (net.contatrans_net.embed.conv, "bias"),
    ]
    for holder, attr in checks:
        p = getattr(holder, attr)
        report = ad.finite_diff_check(
            lambda wt, h=holder, a=attr: loss_with(h, a, wt), Tensor(p.data.copy()), rel_tol=1e-4
        )
        assert report.ok, f"{attr}: {report}"


def test_gain_and_force_net_input_gradients(rng):
    gain = GainNet(rng, 20, 7, hidden=12)
    for p in gain.parameters():
        p.data = rng.normal(0, 0.5, p.data.shape)
    kp_ini = np.linspace(1.0, 5.0, 7)

    def f(x):
        out = gain(x, kp_ini)
        return ad.tsum(out.kp * out.kp) + ad.tsum(out.alpha)

    report = ad.finite_diff_check(f, Tensor(rng.normal(0, 1, 20)), rel_tol=1e-4)
    assert report.ok, report

    force = ContactForceNet(rng, 15, hidden=12)
    for p in force.parameters():
        p.data = rng.normal(0, 0.5, p.data.shape)

    def g(x):
        return ad.tsum(force(x, [0, 2]) ** 2.0)

    report = ad.finite_diff_check(g, Tensor(rng.normal(0, 1, 15)), rel_tol=1e-4)
    assert report.ok, report


def test_posenet_single_window_overfit(rng):
    # one synthetic window: driven hard enough, the angle head reproduces the
    # target to well under a millradian
    from physrefine.training import Adam

    cfg = CausalConvNetConfig(channels=10)
    net = PoseNet(rng, 6, 8, cfg)
    net.set_training(True)
    x = rng.normal(0, 1, (1, 12, 10))
    target_angles = rng.uniform(-0.5, 0.5, 8)
    target_ori = np.array([1.0, 0.0, 0.0, 0.0])
    opt = Adam(net.parameters(), 2e-3)
    for _ in range(400):
        opt.zero_grad()
        ori, angles, probs = net(x)
        loss = ad.tsum((angles[0] - target_angles) ** 2.0) + ad.tsum((ori[0] - target_ori) ** 2.0)
        ad.backward(loss)
        opt.step()
    ori, angles, _ = net(x)
    assert np.abs(angles.data[0] - target_angles).max() < 1e-3
    assert np.abs(ori.data[0] - target_ori).max() < 1e-3


def test_transnet_single_window_overfit(rng):
    from physrefine.training import Adam

    cfg = CausalConvNetConfig(channels=10)
    net = TransNet(rng, 5, cfg)
    net.set_training(True)
    x = rng.normal(0, 1, (1, 25, 10))
    target = np.array([0.31, -0.2, 3.7])
    opt = Adam(net.parameters(), 2e-3)
    for _ in range(500):
        opt.zero_grad()
        out = net(x)
        loss = ad.tsum((out[0] - target) ** 2.0)
        ad.backward(loss)
        opt.step()
    err = np.abs(net(x).data[0] - target).max()
    assert err < 1e-3, f"translation overfit error {err}"


def test_checkpoint_round_trip_all_networks(rng, tmp_path):
    nets = {
        "pose": PoseNet(rng, 17, 40, CFG),
        "trans": TransNet(rng, 17, CFG),
        "gain": GainNet(rng, 232, 46, hidden=16),
        "force": ContactForceNet(rng, 34, hidden=16),
    }
    # give batchnorm stats non-default values
    nets["pose"].ori_net.embed.bn.running_mean += 0.5
    path = tmp_path / "nets.ckpt"
    save_networks(path, nets)
    snapshot = {k: {n: v.copy() for n, v in net.state_dict().items()} for k, net in nets.items()}
    for net in nets.values():
        for p in net.parameters():
            p.data = p.data + 1.0
    nets["pose"].ori_net.embed.bn.running_mean *= 3.0
    load_networks(path, nets)
    for k, net in nets.items():
        for name, val in net.state_dict().items():
            assert np.array_equal(val, snapshot[k][name]), f"{k}/{name}"


def test_load_rejects_missing_network(rng, tmp_path):
    nets = {"pose": PoseNet(rng, 17, 40, CFG)}
    path = tmp_path / "partial.ckpt"
    save_networks(path, nets)
    both = {"pose": PoseNet(rng, 17, 40, CFG), "trans": TransNet(rng, 17, CFG)}
    with pytest.raises(ad.CheckpointError):
        load_networks(path, both)
