import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from divnav import nn
from divnav.sim import Observation

SMALL = nn.Architecture(scan_dim=6, n_tokens=3, embed_dim=4, scan_hidden=(5, 4), head_hidden=5, disc_hidden=6)


def small_nets(seed=0):
    nets = nn.Networks(SMALL, seed)
    rng = np.random.default_rng(seed + 100)
    # move the near-zero final layers off their init so every path carries gradient
    for p in nets.named_params().values():
        p += rng.normal(0, 0.3, p.shape)
    return nets, rng


def check_grads(params, analytic, loss_fn, tol=1e-4):
    worst = {}
    for k, p in params.items():
        num = nn.numerical_gradient(loss_fn, p)
        worst[k] = nn.max_relative_error(analytic[k], num)
    assert max(worst.values()) < tol, worst


# --- gradient checks --------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_policy_gradients(seed):
    nets, rng = small_nets(seed)
    x = rng.normal(size=(7, SMALL.feature_dim))
    z = rng.integers(0, 3, 7)
    a = rng.normal(size=(7, 2))

    def loss():
        mean, std, _ = nets.policy.forward(x, z)
        return float(nn.gaussian_log_prob(a, mean, std).sum())

    mean, std, cache = nets.policy.forward(x, z)
    # d logp / d mean and d logp / d log_std for a diagonal Gaussian
    d_mean = (a - mean) / std ** 2
    d_log_std = (((a - mean) / std) ** 2 - 1.0).sum(axis=0)
    grads = nets.policy.backward(cache, d_mean, d_log_std)
    check_grads(nets.policy.params, grads, loss)


@pytest.mark.parametrize("seed", range(3))
def test_value_gradients(seed):
    nets, rng = small_nets(seed)
    x = rng.normal(size=(6, SMALL.feature_dim))
    z = rng.integers(0, 3, 6)
    target = rng.normal(size=6)

    def loss():
        v, _ = nets.value.forward(x, z)
        return float(((v - target) ** 2).mean())

    v, cache = nets.value.forward(x, z)
    grads = nets.value.backward(cache, 2.0 * (v - target) / len(v))
    check_grads(nets.value.params, grads, loss)


@pytest.mark.parametrize("which", ["disc_s", "disc_sa"])
def test_discriminator_gradients(which):
    nets, rng = small_nets(1)
    disc = getattr(nets, which)
    x = rng.normal(size=(9, disc.net.input_dim))
    y = rng.integers(0, 3, 9)
    _, _, grads = disc.cross_entropy(x, y)
    check_grads(disc.params, grads, lambda: disc.cross_entropy(x, y)[0])


def test_sum_of_squares_single_layer():
    net = nn.DenseNet("lin", [3, 4], ["identity"], np.random.default_rng(0))
    net.params["lin.b0"][:] = 0.0
    y, cache = net.forward(np.eye(3))
    grads, _ = net.backward(cache, 2.0 * y)
    assert np.allclose(grads["lin.W0"], 2.0 * net.params["lin.W0"])


def test_constant_loss_has_zero_gradient():
    net = nn.DenseNet("c", [3, 4, 2], ["tanh", "identity"], np.random.default_rng(0))
    _, cache = net.forward(np.ones((5, 3)))
    grads, dx = net.backward(cache, np.zeros((5, 2)))
    assert all(np.all(g == 0) for g in grads.values()) and np.all(dx == 0)


def test_embedding_gradient_only_for_present_tokens():
    nets, rng = small_nets(2)
    x = rng.normal(size=(4, SMALL.feature_dim))
    mean, std, cache = nets.policy.forward(x, [0, 2, 2, 0])
    grads = nets.policy.backward(cache, np.ones_like(mean), np.zeros(2))
    g = grads["policy.embedding"]
    assert np.all(g[1] == 0) and np.any(g[0] != 0) and np.any(g[2] != 0)


def test_non_finite_loss_aborts():
    nets, _ = small_nets(0)
    x = np.full((2, nets.disc_s.net.input_dim), np.inf)
    with pytest.raises(nn.NonFiniteLossError), np.errstate(invalid="ignore"):
        nets.disc_s.cross_entropy(x, [0, 1])


# --- forward passes ---------------------------------------------------------

def test_policy_forward_pure_and_in_box():
    nets, rng = small_nets(0)
    x = rng.normal(size=SMALL.feature_dim)
    before = {k: v.copy() for k, v in nets.policy.params.items()}
    m1, s1 = nn.policy_forward(nets.policy, x, 1)
    m2, s2 = nn.policy_forward(nets.policy, x, 1)
    assert np.array_equal(m1, m2) and np.array_equal(s1, s2)
    assert all(np.array_equal(before[k], v) for k, v in nets.policy.params.items())
    assert 0.0 <= m1[0] <= 1.0 and -1.0 <= m1[1] <= 1.0


def test_policy_forward_accepts_observation():
    arch = nn.Architecture(scan_dim=2 * 3, n_tokens=2, embed_dim=4, scan_hidden=(4,), head_hidden=4)
    policy = nn.PolicyNet(arch, np.random.default_rng(0))
    obs = Observation(np.full((2, 3), 0.5), (4.0, 0.3), (0.2, -0.1))
    m, _ = nn.policy_forward(policy, obs, 0)
    m2, _ = nn.policy_forward(policy, obs.features(10.0), 0)
    assert np.array_equal(m, m2)


def test_single_token_policy_rereads_identically():
    arch = nn.Architecture(scan_dim=6, n_tokens=1, embed_dim=4, scan_hidden=(5,), head_hidden=5)
    policy = nn.PolicyNet(arch, np.random.default_rng(4))
    x = np.linspace(0, 1, arch.feature_dim)
    assert np.array_equal(nn.policy_forward(policy, x, 0)[0], nn.policy_forward(policy, x, 0)[0])


def test_distinct_tokens_give_distinct_outputs():
    for seed in range(100):
        policy = nn.PolicyNet(SMALL, np.random.default_rng(seed))
        x = np.random.default_rng(seed).normal(size=SMALL.feature_dim)
        m0, _ = nn.policy_forward(policy, x, 0)
        m1, _ = nn.policy_forward(policy, x, 1)
        assert np.max(np.abs(m0 - m1)) > 1e-12


def test_token_out_of_range_rejected():
    policy = nn.PolicyNet(SMALL, np.random.default_rng(0))
    with pytest.raises(ValueError):
        nn.policy_forward(policy, np.zeros(SMALL.feature_dim), 3)
    with pytest.raises(ValueError):
        policy.forward(np.zeros((1, SMALL.feature_dim + 1)), [0])


def test_zero_final_layer_gives_uniform_posterior():
    disc = nn.Discriminator("d", 5, 4, 8, np.random.default_rng(0))
    disc.params["d.W2"][:] = 0.0
    disc.params["d.b2"][:] = 0.0
    p = nn.discriminator_forward(disc, np.arange(5.0))
    assert np.allclose(p, 0.25, atol=1e-15)


def test_posteriors_sum_to_one():
    disc = nn.Discriminator("d", 5, 4, 8, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(scale=50, size=(1000, 5))
    p = nn.discriminator_forward(disc, x)
    assert np.all(p > 0) and np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, (3, 6), elements=st.floats(-700, 700)))
def test_log_softmax_is_a_distribution(logits):
    p = np.exp(nn.log_softmax(logits))
    assert np.all(np.isfinite(p)) and np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_cross_entropy_bias_gradient_at_uniform():
    disc = nn.Discriminator("d", 3, 4, 6, np.random.default_rng(0))
    disc.params["d.W2"][:] = 0.0
    _, _, grads = disc.cross_entropy(np.ones((1, 3)), [2])
    assert np.allclose(grads["d.b2"], [0.25, 0.25, -0.75, 0.25])
    num = nn.numerical_gradient(lambda: disc.cross_entropy(np.ones((1, 3)), [2])[0], disc.params["d.b2"])
    assert nn.max_relative_error(grads["d.b2"], num) < 1e-6


# --- Gaussian head ----------------------------------------------------------

def test_sample_degenerate_std():
    mean = np.array([[0.4, -0.2]])
    a, raw, _ = nn.sample_action(mean, np.full((1, 2), 1e-12), np.random.default_rng(0))
    assert np.allclose(a, mean, atol=1e-10)


def test_log_prob_at_mean():
    assert nn.gaussian_log_prob(np.zeros(2), np.zeros(2), np.ones(2)) == pytest.approx(-1.8378770664093453)
    assert -math.log(2 * math.pi) == pytest.approx(-1.8378770664093453)


def test_sample_monte_carlo_mean():
    n = 100_000
    mean = np.tile([0.5, 0.1], (n, 1))
    std = np.tile([0.2, 0.3], (n, 1))
    _, raw, _ = nn.sample_action(mean, std, np.random.default_rng(3))
    assert np.all(np.abs(raw.mean(axis=0) - [0.5, 0.1]) < 3 * np.array([0.2, 0.3]) / math.sqrt(n))


def test_sample_clamps_but_scores_raw():
    mean = np.array([[1.5, -2.0]])
    a, raw, logp = nn.sample_action(mean, np.full((1, 2), 1e-6), np.random.default_rng(0))
    assert a[0].tolist() == [1.0, -1.0]
    assert logp[0] == pytest.approx(nn.gaussian_log_prob(raw, mean, np.full((1, 2), 1e-6))[0])


def test_gaussian_kl_zero_for_identical():
    m, s = np.array([0.3, 0.1]), np.array([0.5, 0.2])
    assert nn.gaussian_kl(m, s, m, s) == 0.0
    assert nn.gaussian_kl(m, s, m + 0.1, s) > 0.0


# --- Adam -------------------------------------------------------------------

def test_adam_first_step_scalar():
    p = {"w": np.array([0.0])}
    opt = nn.Adam(p, lr=5e-5)
    nn.adam_step(p, {"w": np.array([1.0])}, opt)
    # m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
    assert p["w"][0] == pytest.approx(-4.99999999950000e-05, rel=1e-12)


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([0.3, -0.2])}
    opt = nn.Adam(p, lr=1e-2)
    for _ in range(5):
        opt.step({"w": np.zeros(2)})
    assert p["w"].tolist() == [0.3, -0.2]


def test_adam_deterministic():
    def run():
        nets, rng = small_nets(5)
        opt = nn.Adam(nets.disc_s.params, lr=1e-3)
        x = rng.normal(size=(8, nets.disc_s.net.input_dim))
        for _ in range(20):
            opt.step(nets.disc_s.cross_entropy(x, np.arange(8) % 3)[2])
        return nets.disc_s.params
    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_adam_rejects_foreign_state():
    opt = nn.Adam({"w": np.zeros(1)})
    with pytest.raises(ValueError):
        nn.adam_step({"w": np.zeros(1)}, {"w": np.ones(1)}, opt)


# --- checkpoints ------------------------------------------------------------

def make_ckpt():
    nets, _ = small_nets(0)
    return nn.Checkpoint(SMALL.n_tokens, SMALL.to_dict(), dict(nets.named_params()), {"update": 3})


def test_checkpoint_round_trip_bytes(tmp_path):
    ck = make_ckpt()
    nn.save_checkpoint(tmp_path / "a.bin", ck)
    loaded = nn.load_checkpoint(tmp_path / "a.bin")
    nn.save_checkpoint(tmp_path / "b.bin", loaded)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert all(np.array_equal(ck.arrays[k], loaded.arrays[k]) for k in ck.arrays)
    assert loaded.meta == {"update": 3} and loaded.n_tokens == 3


def test_checkpoint_truncated(tmp_path):
    data = make_ckpt().to_bytes()
    for cut in (4, 30, len(data) - 1):
        with pytest.raises(nn.CorruptCheckpointError):
            nn.Checkpoint.from_bytes(data[:cut])


def test_checkpoint_flipped_byte():
    data = bytearray(make_ckpt().to_bytes())
    data[-20] ^= 0xFF
    with pytest.raises(nn.CorruptCheckpointError):
        nn.Checkpoint.from_bytes(bytes(data))


def test_checkpoint_version_mismatch():
    data = bytearray(make_ckpt().to_bytes())
    data[8:12] = (99).to_bytes(4, "little")
    with pytest.raises(nn.VersionMismatchError):
        nn.Checkpoint.from_bytes(bytes(data))


def test_checkpoint_shape_mismatch():
    ck = make_ckpt()
    other = nn.PolicyNet(nn.Architecture(scan_dim=6, n_tokens=4, embed_dim=4, scan_hidden=(5, 4), head_hidden=5),
                         np.random.default_rng(0))
    with pytest.raises(nn.ShapeMismatchError):
        nn.load_into(other.params, ck.arrays)


def test_checkpoint_errors_are_distinct():
    kinds = {nn.CorruptCheckpointError, nn.VersionMismatchError, nn.ShapeMismatchError}
    assert len(kinds) == 3
    assert not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)
