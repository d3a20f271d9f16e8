import numpy as np
import pytest

from zotoken.numerics import SeededStream, gaussian_vector
from zotoken.quantizer import QuantizedTensor
from zotoken.schedule import build_schedule, forward_noise
from zotoken.toy import (ConceptDataset, FrozenToyModel, analytic_token_optimum, build_model,
                         first_order_oracle_gradient, generate_dataset, ldm_loss, ldm_loss_closed_form,
                         predict_noise, recovery_error)

SCHED = build_schedule(1000)


def make(decoder="linear", bits=8, seed=0, sigma_ref=0.05, gate=(400.0, 500.0), gran="per-tensor"):
    model = build_model(SeededStream(seed), decoder=decoder, quant_bits=bits, gate_lo=gate[0], gate_hi=gate[1],
                        granularity=gran)
    data = generate_dataset(SeededStream(seed + 1000), 8, 5, sigma_ref)
    return model, data


def test_dataset_shapes_and_zero_spread():
    d = generate_dataset(SeededStream(1), 8, 5, 0.05)
    assert d.references.shape == (5, 8) and d.z_star.shape == (8,) and len(d) == 5
    d0 = generate_dataset(SeededStream(1), 8, 5, 0.0)
    assert np.array_equal(d0.references, np.tile(d0.z_star, (5, 1)))
    with pytest.raises(ValueError):
        generate_dataset(SeededStream(1), 8, 0, 0.1)
    with pytest.raises(ValueError):
        generate_dataset(SeededStream(1), 8, 2, -0.1)


def test_dataset_mean_clt():
    d = generate_dataset(SeededStream(2), 8, 10_000, 0.05)
    assert np.all(np.abs(d.references.mean(axis=0) - d.z_star) <= 3 * 0.05 / 100)


def test_dataset_replay():
    a = generate_dataset(SeededStream(3), 8, 4, 0.1)
    b = generate_dataset(SeededStream(3), 8, 4, 0.1)
    assert np.array_equal(a.references, b.references)


def test_gate_shape():
    model, _ = make(gate=(400.0, 600.0))
    ts = np.arange(1, 1001)
    g = np.array([model.gate(t) for t in ts])
    assert np.all((g >= 0) & (g <= 1))
    assert np.all(np.diff(g) >= 0)
    assert np.all(g[ts <= 400] == 0) and np.all(g[ts >= 600] == 1)
    assert model.gate(500) == 0.5
    with pytest.raises(ValueError):
        FrozenToyModel(encoder=np.zeros((2, 4)), layers=(np.zeros((2, 2)),), gate_lo=5, gate_hi=5)


def test_weights_frozen():
    model, _ = make(bits=0)
    with pytest.raises(ValueError):
        model.encoder[0, 0] = 1.0
    with pytest.raises(Exception):
        model.gate_lo = 3.0


def test_quantized_storage_is_integer():
    model, _ = make(bits=8)
    assert model.quantized
    assert isinstance(model.encoder, QuantizedTensor)
    assert all(isinstance(w, QuantizedTensor) for w in model.layers)
    counts = model.parameter_counts()
    assert counts["integer"] == 8 * 64 + 8 * 8
    assert counts["quantized_fraction"] > 0.95
    mlp, _ = make("mlp")
    assert mlp.parameter_counts()["integer"] == 8 * 64 + 32 * 8 + 8 * 32


def test_predict_noise_gated_off():
    model, _ = make()
    z_t = np.arange(8.0)
    t = 300
    a = predict_noise(model, z_t, t, np.ones(64), SCHED)
    b = predict_noise(model, z_t, t, -np.ones(64), SCHED)
    assert np.array_equal(a, b)
    assert np.allclose(a, z_t / np.sqrt(1 - SCHED.abar(t)))


def test_predict_noise_perfect_mean():
    model, _ = make()
    theta = gaussian_vector(SeededStream(5), 64)
    t = 700
    z_t = np.sqrt(SCHED.abar(t)) * model.conditional_mean(t, theta)
    assert np.allclose(predict_noise(model, z_t, t, theta, SCHED), 0, atol=1e-12)


def test_noise_identity_linear():
    model, data = make()
    s = SeededStream(9)
    for _ in range(20):
        theta = gaussian_vector(s, 64)
        eps = gaussian_vector(s, 8)
        t = 600
        z = data.references[1]
        z_t = forward_noise(z, t, eps, SCHED)
        k = np.sqrt(SCHED.abar(t)) / np.sqrt(1 - SCHED.abar(t))
        lhs = predict_noise(model, z_t, t, theta, SCHED) - eps
        rhs = k * (z - model.decode(theta))
        assert np.allclose(lhs, rhs, atol=1e-6)


@pytest.mark.parametrize("decoder", ["linear", "mlp"])
def test_closed_form_agreement(decoder):
    model, data = make(decoder)
    s = SeededStream(10)
    for t in (1, 350, 420, 480, 501, 777, 1000):
        for ref in range(5):
            theta = gaussian_vector(s, 64)
            eps = gaussian_vector(s, 8)
            mc = ldm_loss(model, data, theta, t, eps, ref, SCHED)
            cf = ldm_loss_closed_form(model, data, theta, t, ref, SCHED)
            assert mc >= 0
            assert abs(mc - cf) <= 1e-6 * max(cf, 1e-12) + 1e-12


def test_loss_zero_at_exact_recovery():
    model, data = make(sigma_ref=0.0, bits=0)
    theta, ok = analytic_token_optimum(model, data)
    assert ok
    eps = gaussian_vector(SeededStream(1), 8)
    assert ldm_loss(model, data, theta, 800, eps, 0, SCHED) < 1e-20


def test_gate_isolation():
    model, data = make()
    s = SeededStream(12)
    for _ in range(10):
        t = 1 + int(s.raw(1)[0] % 400)
        eps = gaussian_vector(s, 8)
        a, b = gaussian_vector(s, 64), 10 * gaussian_vector(s, 64)
        assert ldm_loss(model, data, a, t, eps, 2, SCHED) == ldm_loss(model, data, b, t, eps, 2, SCHED)


def test_out_of_range_timestep():
    model, data = make()
    with pytest.raises(ValueError):
        predict_noise(model, np.zeros(8), 0, np.zeros(64), SCHED)
    with pytest.raises(ValueError):
        ldm_loss(model, data, np.zeros(64), 1001, np.zeros(8), 0, SCHED)


def test_quantized_loss_gap_bound():
    # |L_q - L| <= k^2 delta (2 |r| + delta), delta = gamma |dA|_F |theta|,
    # |dA|_F <= |dW|_F |E_q|_F + |W|_F |dE|_F, each |dX|_F <= s_X / 2 * sqrt(size)
    fp, data = make(bits=0)
    q, _ = make(bits=8)
    e, w = fp.weights()
    eq, wq = q.weights()
    de = float(q.encoder.scale) / 2 * np.sqrt(e.size)
    dw = float(q.layers[0].scale) / 2 * np.sqrt(w.size)
    assert np.linalg.norm(eq - e) <= de and np.linalg.norm(wq - w) <= dw
    da = dw * np.linalg.norm(eq) + np.linalg.norm(w) * de
    s = SeededStream(13)
    for _ in range(50):
        theta = gaussian_vector(s, 64)
        eps = gaussian_vector(s, 8)
        t = 501 + int(s.raw(1)[0] % 400)
        k2 = SCHED.snr(t)
        r = np.linalg.norm(data.references[0] - fp.conditional_mean(t, theta))
        delta = fp.gate(t) * da * np.linalg.norm(theta)
        bound = k2 * delta * (2 * r + delta)
        gap = abs(ldm_loss(q, data, theta, t, eps, 0, SCHED) - ldm_loss(fp, data, theta, t, eps, 0, SCHED))
        assert gap <= bound * (1 + 1e-9)


def test_optimum_full_rank_basis_vector():
    # composite = [I_8 | 0]
    e = np.hstack([np.eye(8), np.zeros((8, 56))])
    model = FrozenToyModel(encoder=e, layers=(np.eye(8),))
    z = np.zeros(8)
    z[0] = 1.0
    data = ConceptDataset(z_star=z, sigma_ref=0.0, references=z[None])
    theta, ok = analytic_token_optimum(model, data)
    assert ok
    expected = np.zeros(64)
    expected[0] = 1.0
    assert np.allclose(theta, expected, atol=1e-14)


def test_optimum_rank_deficient():
    e = np.zeros((8, 64))
    e[:4, :4] = np.eye(4)
    model = FrozenToyModel(encoder=e, layers=(np.eye(8),))
    z = np.zeros(8)
    z[6] = 1.0
    data = ConceptDataset(z_star=z, sigma_ref=0.0, references=z[None])
    theta, ok = analytic_token_optimum(model, data)
    assert not ok
    assert np.allclose(theta, 0)


def test_optimum_random_full_row_rank_100_seeds():
    for seed in range(100):
        model = build_model(SeededStream(seed), quant_bits=0)
        data = generate_dataset(SeededStream(seed + 1), 8, 1, 0.0)
        theta, ok = analytic_token_optimum(model, data)
        a = model.composite()
        assert ok
        assert np.linalg.norm(a @ theta - data.z_star) / np.linalg.norm(data.z_star) <= 1e-8
        # minimum norm: theta lies in the row space of the composite
        assert np.allclose(theta, np.linalg.pinv(a) @ data.z_star, atol=1e-8)


def test_optimum_needs_linear():
    model, data = make("mlp")
    with pytest.raises(ValueError):
        analytic_token_optimum(model, data)


def _fd(model, data, theta, t, eps, ref, h=1e-5):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (ldm_loss(model, data, theta + e, t, eps, ref, SCHED) -
                ldm_loss(model, data, theta - e, t, eps, ref, SCHED)) / (2 * h)
    return g


@pytest.mark.parametrize("decoder", ["linear", "mlp"])
def test_oracle_gradient_matches_finite_differences(decoder):
    model, data = make(decoder)
    s = SeededStream(21)
    for _ in range(25):
        theta = gaussian_vector(s, 64)
        eps = gaussian_vector(s, 8)
        t = 420 + int(s.raw(1)[0] % 500)
        ref = int(s.raw(1)[0] % 5)
        g = first_order_oracle_gradient(model, data, theta, t, eps, ref, SCHED)
        fd = _fd(model, data, theta, t, eps, ref)
        assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)


def test_oracle_gradient_gated_off_and_closed_form():
    model, data = make()
    theta = gaussian_vector(SeededStream(3), 64)
    eps = gaussian_vector(SeededStream(4), 8)
    assert not first_order_oracle_gradient(model, data, theta, 200, eps, 0, SCHED).any()
    t = 800
    a = model.composite()
    cf = -2 * SCHED.snr(t) * a.T @ (data.references[3] - a @ theta)
    assert np.allclose(first_order_oracle_gradient(model, data, theta, t, eps, 3, SCHED), cf, rtol=1e-9, atol=1e-12)


def test_stationary_at_optimum():
    model, data = make(sigma_ref=0.0)
    theta, ok = analytic_token_optimum(model, data)
    assert ok
    eps = gaussian_vector(SeededStream(8), 8)
    g = first_order_oracle_gradient(model, data, theta, 700, eps, 0, SCHED)
    assert np.linalg.norm(g) <= 1e-8


def test_recovery_error():
    model, data = make(sigma_ref=0.0)
    theta, _ = analytic_token_optimum(model, data)
    assert recovery_error(model, data, theta) < 1e-12
    assert recovery_error(model, data, np.zeros(64)) == pytest.approx(1.0)
