import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sbldf.model import Dictionary, DomainError
from sbldf.synth import (
    DictModel,
    SignalModel,
    block_matrix,
    corrupt_prediction,
    gen_dictionary,
    gen_sparse_signal,
    gen_tracking,
    load_tracking,
    measure,
    read_container,
    rng_for,
    save_tracking,
    trial_seed,
    write_container,
)


def test_trial_seed_is_xor():
    assert trial_seed(12, 5) == 12 ^ 5
    assert trial_seed(0, 0) == 0


def test_streams_are_independent_and_reproducible():
    a = rng_for(3, 0).random(5)
    np.testing.assert_array_equal(a, rng_for(3, 0).random(5))
    assert not np.array_equal(a, rng_for(3, 1).random(5))
    assert not np.array_equal(a, rng_for(4, 0).random(5))


def test_block_matrix_preset():
    B = block_matrix(8, 4, 0.8)
    blk = np.full((4, 4), 0.8)
    np.fill_diagonal(blk, 1.0)
    np.testing.assert_array_equal(B[:4, :4], blk)
    np.testing.assert_array_equal(B[4:, 4:], blk)
    np.testing.assert_array_equal(B[:4, 4:], 0.0)


def test_block_size_must_divide():
    with pytest.raises(DomainError):
        gen_dictionary(4, 10, DictModel("local_coherent", block_size=4))


@pytest.mark.parametrize("kind", ["iid_scaled", "local_coherent", "local_coherent_scaled"])
def test_structure_c_one_is_iid(kind):
    ref = gen_dictionary(6, 12, DictModel("iid"), seed=9).phi
    got = gen_dictionary(6, 12, DictModel(kind, structure_c=1.0), seed=9).phi
    np.testing.assert_array_equal(got, ref)


@pytest.mark.parametrize("kind", ["iid", "iid_scaled", "local_coherent", "local_coherent_scaled"])
def test_dictionary_determinism(kind):
    a = gen_dictionary(7, 16, DictModel(kind), seed=4).phi
    b = gen_dictionary(7, 16, DictModel(kind), seed=4).phi
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, gen_dictionary(7, 16, DictModel(kind), seed=5).phi)


def test_base_entry_variance():
    m = 64
    phi = gen_dictionary(m, 4000, seed=0).phi
    # entries have variance 1 / sqrt(M)
    assert np.var(phi) == pytest.approx(m**-0.5, rel=0.02)


@pytest.mark.parametrize("kind", ["iid_scaled", "local_coherent", "local_coherent_scaled"])
@pytest.mark.parametrize("c", [None, 2.0, 10.0])
def test_snr_parity(kind, c):
    # reproduce the base draw and the reference signal from their streams
    m, n, seed = 10, 20, 3
    phi = gen_dictionary(m, n, DictModel(kind, structure_c=c), seed).phi
    base = gen_dictionary(m, n, DictModel("iid"), seed).phi
    x_ref = rng_for(seed, 2).normal(size=n)
    assert np.linalg.norm(phi @ x_ref) == pytest.approx(np.linalg.norm(base @ x_ref), rel=1e-10)


def _max_block_coherence(phi, bs):
    cols = phi / np.linalg.norm(phi, axis=0)
    best = 0.0
    for k in range(0, phi.shape[1], bs):
        G = np.abs(cols[:, k : k + bs].T @ cols[:, k : k + bs])
        np.fill_diagonal(G, 0.0)
        best = max(best, G.max())
    return best


@pytest.mark.parametrize("seed", range(3))
def test_coherence_monotone_in_c(seed):
    vals = [_max_block_coherence(gen_dictionary(20, 40, DictModel("local_coherent", structure_c=c), seed).phi, 4)
            for c in (1.0, 1.5, 2.0, 4.0, 10.0, 100.0)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_scaled_columns_preset_range():
    phi = gen_dictionary(8, 200, DictModel("iid_scaled"), seed=2).phi
    base = gen_dictionary(8, 200, DictModel("iid"), seed=2).phi
    ratio = phi[0] / base[0]
    ratio /= ratio.max()
    assert ratio.min() < 0.05  # U[0, 1] preset reaches near zero


def test_sparse_signal_examples():
    x = gen_sparse_signal(4, SignalModel("unit_nonzeros", 2), seed=0)
    assert sorted(x.tolist()) == [0.0, 0.0, 1.0, 1.0]
    for seed in range(20):
        assert np.count_nonzero(gen_sparse_signal(30, SignalModel("gaussian_nonzeros", 7), seed)) == 7
    np.testing.assert_array_equal(gen_sparse_signal(30, SignalModel("gaussian_nonzeros", 7), 3),
                                  gen_sparse_signal(30, SignalModel("gaussian_nonzeros", 7), 3))
    with pytest.raises(DomainError):
        gen_sparse_signal(3, SignalModel("unit_nonzeros", 4))


def test_measure_examples():
    D = gen_dictionary(5, 8, seed=0)
    np.testing.assert_array_equal(measure(D, np.zeros(8), 0.0), np.zeros(5))
    x = gen_sparse_signal(8, SignalModel("gaussian_nonzeros", 2), 1)
    np.testing.assert_array_equal(measure(D, x, 0.0, seed=5), D.phi @ x)
    with pytest.raises(DomainError):
        measure(D, x, -1.0)


def test_measurement_noise_variance():
    D = Dictionary(np.zeros((100000, 1)))
    e = measure(D, np.zeros(1), 0.04, seed=7)
    assert abs(np.var(e) / 0.04 - 1) < 0.05


def test_corrupt_prediction_examples():
    x = np.array([0.0, 2.0, 0.0, -1.0, 0.0])
    np.testing.assert_array_equal(corrupt_prediction(x, support_swaps=0), x)
    np.testing.assert_array_equal(corrupt_prediction(np.array([1.0, 0.0]), support_swaps=1), [0.0, 1.0])
    with pytest.raises(DomainError):
        corrupt_prediction(np.array([1.0, 0.0]), support_swaps=2)
    with pytest.raises(DomainError):
        corrupt_prediction(x)
    with pytest.raises(DomainError):
        corrupt_prediction(x, support_swaps=1, swap_prob=0.5)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(0, 5), p=st.floats(0, 1))
def test_swaps_preserve_sparsity_and_values(seed, k, p):
    x = gen_sparse_signal(20, SignalModel("gaussian_nonzeros", 5), seed)
    for out in (corrupt_prediction(x, support_swaps=k, seed=seed), corrupt_prediction(x, swap_prob=p, seed=seed)):
        assert np.count_nonzero(out) == 5
        np.testing.assert_array_equal(np.sort(out[out != 0]), np.sort(x[x != 0]))
    moved = corrupt_prediction(x, support_swaps=k, seed=seed)
    assert np.count_nonzero((moved != 0) & (x == 0)) == k


def test_corruption_noise_variance():
    out = corrupt_prediction(np.zeros(100000), support_swaps=0, sigma_dyn2=0.25, seed=1)
    assert abs(np.var(out) / 0.25 - 1) < 0.05


@pytest.mark.parametrize("seed", range(5))
def test_tracking_rows_keep_sparsity(seed):
    ds = gen_tracking(30, 6, 30, 0.2, seed)
    assert ds.x_true.shape == (30, 30) and ds.F.shape == (29, 30, 30)
    assert np.all(np.count_nonzero(ds.x_true, axis=1) == 6)
    nz = ds.x_true[0][ds.x_true[0] != 0]
    assert np.all(np.abs(nz) >= 0.1)
    # amplitudes travel with their targets
    for t in range(30):
        np.testing.assert_array_equal(np.sort(ds.x_true[t][ds.x_true[t] != 0]), np.sort(nz))


def test_tracking_clamps_small_amplitudes():
    # find a seed whose raw amplitude draw has an entry below 0.1 in magnitude
    for seed in range(200):
        rng = rng_for(seed, 6)
        rng.choice(40, size=5, replace=False)
        raw = rng.normal(size=5)
        if np.any(np.abs(raw) < 0.1):
            break
    ds = gen_tracking(40, 5, 1, 0.0, seed)
    vals = ds.x_true[0][ds.x_true[0] != 0]
    small = raw[np.abs(raw) < 0.1]
    assert small.size
    for v in small:
        assert 0.1 * np.sign(v) in vals


@pytest.mark.parametrize("seed", range(4))
def test_tracking_without_innovations_follows_dynamics(seed):
    ds = gen_tracking(25, 4, 20, 0.0, seed)
    x = ds.x_true[0]
    for t in range(1, 20):
        x = ds.F[t - 1] @ x
        np.testing.assert_array_equal(x, ds.x_true[t])


def test_tracking_moves_are_single_steps():
    ds = gen_tracking(50, 3, 15, 0.3, seed=2)
    for t in range(1, 15):
        prev = set(np.flatnonzero(ds.x_true[t - 1]).tolist())
        for p in np.flatnonzero(ds.x_true[t]):
            assert any(((p - q) % 50) in (0, 1, 49) for q in prev)


def test_tracking_determinism_and_measurements():
    a = gen_tracking(20, 3, 5, 0.1, seed=8, m=10, sigma_obs2=1e-4)
    b = gen_tracking(20, 3, 5, 0.1, seed=8, m=10, sigma_obs2=1e-4)
    np.testing.assert_array_equal(a.x_true, b.x_true)
    np.testing.assert_array_equal(a.y, b.y)
    assert a.y.shape == (5, 10)


def test_container_round_trip(tmp_path):
    ds = gen_tracking(12, 2, 4, 0.1, seed=3, m=6, sigma_obs2=1e-3)
    path = tmp_path / "ds.bin"
    save_tracking(ds, path)
    back = load_tracking(path)
    np.testing.assert_array_equal(back.x_true, ds.x_true)
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.F, ds.F)
    np.testing.assert_array_equal(back.directions, ds.directions)
    np.testing.assert_array_equal(back.dictionary.phi, ds.dictionary.phi)
    assert (back.innovation_prob, back.sigma_obs2, back.seed) == (0.1, 1e-3, 3)


def test_container_layout(tmp_path):
    path = tmp_path / "c.bin"
    write_container(path, {"a": np.arange(6.0).reshape(2, 3)})
    raw = path.read_bytes()
    assert raw[:8] == b"SBLDFBIN"
    payload = np.frombuffer(raw[-48:], dtype="<f8")
    np.testing.assert_array_equal(payload, np.arange(6.0))
    np.testing.assert_array_equal(read_container(path)["a"], np.arange(6.0).reshape(2, 3))
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nope")
    with pytest.raises(ValueError):
        read_container(bad)
