import math

import numpy as np
import pytest

from psens import nnlab
from psens.privacy import DpSgdParams, clip_rows

from conftest import central_difference


def reference_forward(w, x):
    """Plain numpy forward pass with explicit weight matrices."""
    W1 = w[0:200].reshape(25, 8)
    W2 = w[200:264].reshape(8, 8)
    b2 = w[264:272]
    W3 = w[272:280]
    sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    h1 = sig(x @ W1)
    h2 = sig(h1 @ W2 + b2)
    return sig(h2 @ W3)


def reference_loss(w, x, y):
    p = reference_forward(w, x)
    return -(y * np.log(p) + (1 - y) * np.log(1 - p))


@pytest.fixture(scope="module")
def small_data():
    return nnlab.gen_synthetic(nnlab.DataSpec(n_train_per_class=20, n_test_per_class=5, seed=3))


def test_base_images():
    data = nnlab.gen_synthetic(nnlab.DataSpec(n_train_per_class=1, n_test_per_class=1, noise_std=0.0))
    vertical = data.train.images[0]
    assert data.train.labels.tolist() == [0, 1]
    assert np.flatnonzero(vertical == 0.0).tolist() == [2, 7, 12, 17, 22]
    assert np.all(np.delete(vertical, [2, 7, 12, 17, 22]) == 1.0)
    assert np.flatnonzero(data.train.images[1] == 0.0).tolist() == [10, 11, 12, 13, 14]


def test_default_counts_and_determinism():
    spec = nnlab.DataSpec(1000, 100, 0.2, seed=7)
    a, b = nnlab.gen_synthetic(spec), nnlab.gen_synthetic(spec)
    assert a.train.images.shape == (2000, 25) and a.test.images.shape == (200, 25)
    assert np.bincount(a.train.labels).tolist() == [1000, 1000]
    assert np.bincount(a.test.labels).tolist() == [100, 100]
    assert a.train.images.tobytes() == b.train.images.tobytes()
    assert a.test.images.tobytes() == b.test.images.tobytes()
    noise = a.train.images - np.array([nnlab.base_image(c) for c in a.train.labels])
    assert abs(noise.std() - 0.2) < 0.005


def test_parameter_count(mlp):
    assert len(mlp.param_vars) == nnlab.N_PARAMS == 280
    assert len(mlp.input_vars) == 25


def test_zero_weights_loss_is_ln2(mlp):
    # hidden activations are 0.5 but every output weight is 0, so p = sigmoid(0)
    w = np.zeros(280)
    x = nnlab.base_image(0)
    assert reference_loss(w, x, 1.0) == pytest.approx(math.log(2), abs=1e-15)
    losses, _ = nnlab.per_sample_gradients(mlp, w, [x], [1.0])
    assert losses[0] == pytest.approx(0.6931472, abs=1e-7)


def test_symbolic_model_matches_numpy_reference(mlp, small_data):
    w = nnlab.init_weights(9)
    p = nnlab.predict_proba(mlp, w, small_data.train.images)
    np.testing.assert_allclose(p, reference_forward(w, small_data.train.images), rtol=1e-14)


def test_parameter_gradients_match_finite_differences(mlp):
    rng = np.random.default_rng(17)
    for _ in range(20):
        w = rng.uniform(-1, 1, size=280)
        x = nnlab.base_image(int(rng.integers(2))) + rng.normal(0, 0.2, size=25)
        y = float(rng.integers(2))
        _, grads = nnlab.per_sample_gradients(mlp, w, [x], [y])
        idx = rng.choice(280, size=12, replace=False)
        for k in idx:
            def f(t, k=k):
                ww = w.copy()
                ww[k] = t[0]
                return reference_loss(ww, x, y)

            fd = central_difference(f, [w[k]], 1e-5)[0]
            assert abs(grads[0, k] - fd) <= max(1e-5 * abs(fd), 1e-9)


def test_single_sample_step_is_plain_sgd(mlp):
    x = nnlab.base_image(1) + 0.05
    split = nnlab.Split("train", x[None, :], np.array([1]))
    data = nnlab.Dataset(nnlab.DataSpec(), split, nnlab.Split("test", x[None, :], np.array([1])))
    cfg = nnlab.TrainConfig(learning_rate=0.1, max_epochs=1, init_seed=5)
    res = nnlab.train_sgd(mlp, data, cfg)
    w0 = nnlab.init_weights(5)
    _, g = nnlab.per_sample_gradients(mlp, w0, split.images, split.labels)
    assert np.array_equal(res.weights, w0 - 0.1 * g[0])
    assert res.epochs == 1


def test_zero_learning_rate_keeps_weights(mlp, small_data):
    res = nnlab.train_sgd(mlp, small_data, nnlab.TrainConfig(learning_rate=0.0, max_epochs=5, init_seed=1))
    assert np.array_equal(res.weights, nnlab.init_weights(1))
    assert all(np.array_equal(row, res.trajectory[0]) for row in res.trajectory)


def test_dpsgd_degenerates_to_sgd(mlp, small_data):
    n = len(small_data.train)
    sgd = nnlab.train_sgd(mlp, small_data, nnlab.TrainConfig(max_epochs=3, init_seed=2))
    dp = DpSgdParams(clip_bound=1e12, noise_multiplier=0.0, learning_rate=0.1, batch_size=n, seed=0)
    dps = nnlab.train_dpsgd(mlp, small_data, nnlab.TrainConfig(optimizer="dpsgd", max_epochs=3, init_seed=2, dp=dp))
    assert np.max(np.abs(sgd.trajectory - dps.trajectory)) <= 1e-12


def test_clipped_contributions_bounded(mlp, small_data):
    _, grads = nnlab.per_sample_gradients(mlp, nnlab.init_weights(0), small_data.train.images, small_data.train.labels)
    clipped = clip_rows(grads, 0.1)
    assert np.all(np.linalg.norm(clipped, axis=1) <= 0.1 + 1e-12)


def test_dpsgd_is_seeded(mlp, small_data):
    n = len(small_data.train)

    def run(seed):
        dp = DpSgdParams(clip_bound=0.1, noise_multiplier=5.0, learning_rate=0.1, batch_size=n, seed=seed)
        return nnlab.train_dpsgd(mlp, small_data, nnlab.TrainConfig(optimizer="dpsgd", max_epochs=4, dp=dp)).weights

    assert run(1).tobytes() == run(1).tobytes()
    assert run(1).tobytes() != run(2).tobytes()


def test_undefined_loss_aborts_with_sample_index(mlp):
    # pixel 0 switches the network between p = 0.5 and p == 1.0 exactly
    w = np.zeros(280)
    w[0:8] = 50.0
    w[200:264] = 50.0
    w[264:272] = -200.0
    w[272:280] = 10.0
    images = np.zeros((3, 25))
    images[:, 0] = [-1.0, 1.0, 1.0]
    assert reference_forward(w, images[1]) == 1.0
    with pytest.raises(nnlab.NumericalError) as info:
        nnlab.per_sample_gradients(mlp, w, images, [0.0, 0.0, 0.0])
    assert info.value.sample_index == 1


def test_zero_weights_pixel_ps_undefined(mlp):
    ps = nnlab.pixel_partial_sensitivity(mlp, np.zeros(280), nnlab.base_image(0), 0, "gradient")
    assert np.all(np.isnan(ps))
    ps, phi = nnlab.batch_pixel_ps(mlp, np.zeros(280), [nnlab.base_image(0)], [0], "fractional")
    assert phi[0] == 0.0 and np.all(np.isnan(ps))


def test_fractional_pixel_ps_unit_norm(mlp, small_data):
    w = nnlab.init_weights(4)
    ps, phi = nnlab.batch_pixel_ps(mlp, w, small_data.train.images, small_data.train.labels, "fractional")
    ok = phi > 1e-8
    assert ok.all()
    np.testing.assert_allclose(np.linalg.norm(ps[ok], axis=1), 1.0, rtol=0, atol=1e-9)


def test_gradient_pixel_ps_matches_finite_differences(mlp, small_data):
    w = nnlab.init_weights(4) * 3
    for i in (0, 7, 25, 39):
        x, y = small_data.train.images[i], small_data.train.labels[i]
        ps = nnlab.pixel_partial_sensitivity(mlp, w, x, y, "gradient")

        def phi(px):
            return nnlab.batch_pixel_ps(mlp, w, [px], [y], "fractional")[1][0]

        fd = central_difference(phi, x, 1e-6)
        scale = np.max(np.abs(fd))
        assert np.all(np.abs(ps - fd) <= 1e-4 * np.maximum(np.abs(fd), 1e-3 * scale))


def test_pixel_ps_batch_matches_rowwise_bitwise(mlp, bar_data):
    w = nnlab.init_weights(8)
    images, labels = bar_data.train.images[::2], bar_data.train.labels[::2]
    batch, _ = nnlab.batch_pixel_ps(mlp, w, images, labels, "gradient")
    assert batch.shape == (1000, 25)
    rows = np.array([nnlab.pixel_partial_sensitivity(mlp, w, x, y, "gradient") for x, y in zip(images, labels)])
    assert batch.tobytes() == rows.tobytes()


def test_ps_report_single_sample(mlp, small_data):
    w = nnlab.init_weights(4)
    one = nnlab.Split("one", small_data.train.images[:1], small_data.train.labels[:1])
    rep = nnlab.ps_report(mlp, w, one, "fractional", bins=10)
    assert np.array_equal(rep.max_abs_map[0], np.abs(rep.per_sample_ps[0]))
    assert np.all(np.isnan(rep.max_abs_map[1]))
    assert rep.hist_counts.shape == (25, 10)


def test_ps_report_conservation_and_maps(mlp, small_data):
    w = nnlab.init_weights(4)
    w_zero_path = w.copy()
    rep = nnlab.ps_report(mlp, w_zero_path, small_data.train, "gradient", bins=7)
    n = len(small_data.train)
    assert np.array_equal(rep.hist_counts.sum(axis=1), n - rep.undefined_counts)
    for c in (0, 1):
        rows = rep.per_sample_ps[small_data.train.labels == c]
        assert np.array_equal(rep.max_abs_map[c], np.nanmax(np.abs(rows), axis=0))
        assert np.array_equal(rep.min_signed[c], np.nanmin(rows, axis=0))
    assert rep.bin_edges[0] == np.nanmin(rep.per_sample_ps)
    assert rep.bin_edges[-1] == np.nanmax(rep.per_sample_ps)


def test_ps_report_counts_undefined(mlp, small_data):
    rep = nnlab.ps_report(mlp, np.zeros(280), small_data.train, "fractional", bins=5)
    assert np.all(rep.undefined_counts == len(small_data.train))
    assert rep.hist_counts.sum() == 0


def test_ps_report_empty_split(mlp):
    empty = nnlab.Split("test", np.empty((0, 25)), np.empty(0, dtype=np.int64))
    with pytest.raises(ValueError):
        nnlab.ps_report(mlp, np.zeros(280), empty)


def test_sgd_run_golden(sgd_run):
    # fixed after the first verified run with seeds data=7, init=42
    assert sgd_run.epochs == 5000
    assert sgd_run.train_loss[-1] < 0.1
    assert sgd_run.test_accuracy[-1] >= 0.95
    assert sgd_run.trajectory.shape == (5001, 280)


def test_row_sum_is_sequential():
    rows = np.array([[1e16], [1.0], [-1e16], [1.0]])
    # ((1e16 + 1) - 1e16) + 1 == 1 in strict row order
    assert nnlab._sum_rows(rows)[0] == 1.0
    assert nnlab._sum_rows(np.empty((0, 3))).tolist() == [0.0, 0.0, 0.0]
