import numpy as np
import pytest

from timeweave import aggregator as agg
from timeweave import autodiff as ad
from gradcheck import check_grads

RNG = np.random.default_rng(20240812)
EPS = 1e-8


def random_tokens(n, dim, seed=0):
    rng = np.random.default_rng(seed)
    z = ad.parameter(rng.normal(size=(n, dim)))
    rel = ad.Tensor(rng.uniform(0.05, 1.0, size=n))
    return z, rel


def test_bucket_boundary_half_open():
    t_max = 480.0
    tau = 2.0 * np.array([59.99, 60.0]) / t_max - 1.0
    ids = agg.bucket_ids(tau, 60.0, t_max)
    assert list(ids) == [0, 1]


def test_bucket_center_first():
    assert agg.bucket_center(0, 60.0) == 30.0


def test_grid_times_land_on_intended_buckets():
    # fp cancellation in the tau -> minutes restore must not shift boundaries
    t_max = 2880.0
    times = np.arange(48) * 60.0
    tau = 2.0 * times / t_max - 1.0
    for s in (60.0, 120.0, 240.0):
        ids = agg.bucket_ids(tau, s, t_max)
        assert np.array_equal(ids, (times // s).astype(int))


def test_bucketize_matches_scalar_oracle():
    t_max = 600.0
    for trial in range(30):
        rng = np.random.default_rng(trial)
        tau = np.sort(rng.uniform(-1, 1, size=200))
        s = float(rng.choice([30.0, 60.0, 75.0, 120.0]))
        buckets = agg.bucketize(tau, s, t_max)
        # scalar oracle over tokens
        oracle = {}
        last = int(np.ceil(t_max / s)) - 1
        for i, t in enumerate(tau):
            u = round((t + 1.0) / 2.0 * t_max, 6)
            k = min(int(u // s), last)
            oracle.setdefault(k, []).append(i)
        assert {k: list(idx) for k, idx in buckets} == oracle
        # partition: every token in exactly one bucket
        assert sum(len(idx) for _, idx in buckets) == 200


def test_pool_uniform_weights_is_mean():
    z = ad.Tensor(np.array([[1.0, 3.0], [3.0, 5.0]]))
    rel = ad.Tensor(np.array([1.0, 1.0]))
    mu, _ = agg.pool(np.array([0, 1]), z, rel, eps=EPS)
    assert np.allclose(mu.data, [2.0, 4.0], atol=1e-7)


def test_pool_single_token_passthrough():
    z = ad.Tensor(np.array([[2.0, -1.0]]))
    rel = ad.Tensor(np.array([0.5]))
    mu, _ = agg.pool(np.array([0]), z, rel, eps=EPS)
    assert np.allclose(mu.data, [2.0, -1.0], atol=1e-6)


def test_pool_matches_scalar_oracle():
    for trial in range(100):
        rng = np.random.default_rng(trial + 1000)
        n = int(rng.integers(1, 17))
        d = int(rng.integers(1, 5))
        z = ad.Tensor(rng.normal(size=(n, d)))
        rel = ad.Tensor(rng.uniform(0.01, 1.0, size=n))
        mu, m2 = agg.pool(np.arange(n), z, rel, eps=EPS)
        denom = sum(rel.data[i] for i in range(n)) + EPS
        for j in range(d):
            num = sum(rel.data[i] * z.data[i, j] for i in range(n))
            num2 = sum(rel.data[i] * z.data[i, j] ** 2 for i in range(n))
            assert abs(mu.data[j] - num / denom) < 1e-12
            assert abs(m2.data[j] - num2 / denom) < 1e-12


def test_dispersion_identical_tokens_near_zero():
    z = ad.Tensor(np.tile([1.5, -2.0], (4, 1)))
    rel = ad.Tensor(np.full(4, 0.8))
    mu, _ = agg.pool(np.arange(4), z, rel, eps=EPS)
    nu = agg.dispersion(np.arange(4), z, rel, mu, eps=EPS)
    assert np.all(nu.data >= 0.0)
    assert np.all(nu.data < 1e-7)


def test_dispersion_symmetric_pair():
    a = np.array([0.7, -1.2])
    z = ad.Tensor(np.stack([a, -a]))
    rel = ad.Tensor(np.array([1.0, 1.0]))
    mu, _ = agg.pool(np.arange(2), z, rel, eps=EPS)
    nu = agg.dispersion(np.arange(2), z, rel, mu, eps=EPS)
    assert np.allclose(nu.data, a * a, atol=1e-7)


def test_dispersion_clip_exact_zero():
    # nonneg clip maps tiny negative cancellation residue to exactly 0
    residue = ad.Tensor(np.array([-1e-17, 0.0, 1e-17]))
    clipped = ad.clip(residue, 0.0, None)
    assert clipped.data[0] == 0.0 and clipped.data[2] == 1e-17


def test_bucket_stats_fully_observed():
    rel = ad.Tensor(np.ones(4))
    g = agg.bucket_stats(np.arange(4), np.ones(4), rel, np.zeros(4), eps=EPS)
    assert g.data[0] == pytest.approx(np.log(5.0), abs=1e-12)
    assert g.data[1] == 1.0
    assert g.data[2] == pytest.approx(np.log(5.0), abs=1e-9)
    assert g.data[3] == pytest.approx(0.0, abs=1e-9)


def test_bucket_stats_fully_missing_constant_staleness():
    rel = ad.Tensor(np.full(3, 0.4))
    g = agg.bucket_stats(np.arange(3), np.zeros(3), rel, np.full(3, 0.5), eps=EPS)
    assert g.data[1] == 0.0
    assert g.data[3] == pytest.approx(0.5, abs=1e-7)


def test_bucket_stats_matches_scalar_oracle():
    for trial in range(100):
        rng = np.random.default_rng(trial + 500)
        n = int(rng.integers(1, 12))
        mask = (rng.random(n) < 0.5).astype(float)
        rel = ad.Tensor(rng.uniform(0.01, 1.0, size=n))
        stale = rng.uniform(0, 1, size=n)
        g = agg.bucket_stats(np.arange(n), mask, rel, stale, eps=EPS)
        n_obs = sum(mask)
        eff = sum(rel.data)
        stale_w = sum(rel.data[i] * stale[i] for i in range(n)) / (eff + EPS)
        expect = [np.log1p(n_obs), n_obs / n, np.log1p(eff), stale_w]
        assert np.max(np.abs(g.data - expect)) < 1e-12


def make_msq(n=40, dim=4, scales=(60.0, 120.0), t_max=480.0, seed=0,
             weaving="chronological", stats=True):
    rng = np.random.default_rng(seed)
    time_norm = np.sort(rng.uniform(-1, 1, size=n))
    z = ad.parameter(rng.normal(size=(n, dim)))
    rel = ad.Tensor(rng.uniform(0.05, 1.0, size=n))
    mask = (rng.random(n) < 0.5).astype(float)
    stale = rng.uniform(0, 1, size=n)
    params = agg.init_aggregator_params(rng, len(scales), dim)
    msq = agg.aggregate(z, rel, mask, stale, time_norm, t_max, scales, params,
                        stats_augment=stats, weaving=weaving,
                        weave_rng=np.random.default_rng(1))
    return msq, z, rel, mask, stale, time_norm, params


def test_weave_two_scale_center_order():
    # full coverage of the first 120 minutes at scales {60, 120}
    t_max = 120.0
    time_norm = 2.0 * np.array([10.0, 70.0]) / t_max - 1.0
    dim = 3
    rng = np.random.default_rng(0)
    z = ad.Tensor(rng.normal(size=(2, dim)))
    rel = ad.Tensor(np.ones(2))
    params = agg.init_aggregator_params(rng, 2, dim)
    msq = agg.aggregate(z, rel, np.ones(2), np.zeros(2), time_norm, t_max,
                        (60.0, 120.0), params)
    assert list(msq.centers) == [30.0, 60.0, 90.0]
    assert list(msq.scale_idx) == [0, 1, 0]
    assert list(msq.bucket_k) == [0, 0, 1]


def test_weave_single_scale_identity():
    msq, *_ = make_msq(scales=(60.0,), seed=3)
    assert np.array_equal(msq.centers, np.sort(msq.centers))
    ident = agg.weave_order(msq.centers, mode="chronological")
    assert np.array_equal(ident, np.arange(msq.n_tokens))


def test_weave_is_permutation_with_nondecreasing_centers():
    for seed in range(20):
        woven, *rest = make_msq(seed=seed, scales=(60.0, 120.0, 240.0))
        flat, *_ = make_msq(seed=seed, scales=(60.0, 120.0, 240.0), weaving="none")
        assert np.all(np.diff(woven.centers) >= 0)
        # sort oracle: stable argsort of the unwoven concatenation reproduces it
        order = np.array(sorted(range(flat.n_tokens),
                                key=lambda i: flat.centers[i]))
        assert np.array_equal(woven.centers, flat.centers[order])
        assert np.array_equal(woven.scale_idx, flat.scale_idx[order])
        assert np.array_equal(woven.bucket_k, flat.bucket_k[order])
        assert np.allclose(woven.tokens.data, flat.tokens.data[order], atol=0)


def test_weave_tie_break_scale_then_bucket():
    msq, *_ = make_msq(seed=7, scales=(60.0, 120.0, 240.0), t_max=480.0)
    for i in range(msq.n_tokens - 1):
        if msq.centers[i] == msq.centers[i + 1]:
            assert msq.scale_idx[i] < msq.scale_idx[i + 1]


def test_partition_and_token_bound():
    t_max = 2880.0
    times = np.repeat(np.arange(48) * 60.0, 17)
    tau = 2.0 * times / t_max - 1.0
    total = 0
    for s in (60.0, 120.0, 240.0):
        buckets = agg.bucketize(tau, s, t_max)
        assert sum(len(ix) for _, ix in buckets) == tau.size
        total += len(buckets)
    assert total <= agg.max_tokens(t_max, (60.0, 120.0, 240.0)) == 84


def test_pool_scale_invariance_in_rel():
    z, rel = random_tokens(8, 3, seed=11)
    mu1, _ = agg.pool(np.arange(8), z, rel, eps=1e-8)
    rel_scaled = ad.Tensor(rel.data * 7.3)
    mu2, _ = agg.pool(np.arange(8), z, rel_scaled, eps=1e-8)
    assert np.max(np.abs(mu1.data - mu2.data)) / np.max(np.abs(mu1.data)) < 1e-6


def test_dispersion_invariant_under_reordering():
    rng = np.random.default_rng(5)
    z = ad.Tensor(rng.normal(size=(6, 3)))
    rel = ad.Tensor(rng.uniform(0.1, 1, size=6))
    mu, _ = agg.pool(np.arange(6), z, rel)
    nu1 = agg.dispersion(np.arange(6), z, rel, mu)
    perm = rng.permutation(6)
    mu2, _ = agg.pool(perm, z, rel)
    nu2 = agg.dispersion(perm, z, rel, mu2)
    assert np.allclose(nu1.data, nu2.data, atol=1e-12)


def test_batched_matches_per_sample():
    rng = np.random.default_rng(9)
    n, dim, B = 30, 3, 4
    t_max, scales = 480.0, (60.0, 120.0)
    time_norm = np.sort(rng.uniform(-1, 1, size=n))
    params = agg.init_aggregator_params(rng, 2, dim)
    zb = rng.normal(size=(B, n, dim))
    relb = rng.uniform(0.05, 1, size=(B, n))
    maskb = (rng.random((B, n)) < 0.5).astype(float)
    staleb = rng.uniform(0, 1, size=(B, n))
    batched = agg.aggregate(ad.Tensor(zb), ad.Tensor(relb), maskb, staleb,
                            time_norm, t_max, scales, params)
    for b in range(B):
        single = agg.aggregate(ad.Tensor(zb[b]), ad.Tensor(relb[b]), maskb[b],
                               staleb[b], time_norm, t_max, scales, params)
        assert np.allclose(batched.tokens.data[b], single.tokens.data, atol=1e-12)
        assert np.array_equal(batched.centers, single.centers)


def test_aggregate_gradients_match_fd():
    rng = np.random.default_rng(13)
    n, dim = 18, 3
    time_norm = np.sort(rng.uniform(-1, 1, size=n))
    z = ad.parameter(rng.normal(size=(n, dim)))
    rel = ad.parameter(rng.uniform(0.1, 1.0, size=n))
    mask = (rng.random(n) < 0.5).astype(float)
    stale = rng.uniform(0, 1, size=n)
    params = agg.init_aggregator_params(rng, 2, dim)
    probe = rng.normal(size=(agg.max_tokens(480.0, (60.0, 120.0)), dim))

    def build():
        msq = agg.aggregate(z, rel, mask, stale, time_norm, 480.0,
                            (60.0, 120.0), params)
        pr = probe[: msq.n_tokens]
        return ad.sum_(ad.mul(msq.tokens, pr))

    tensors = dict(params.tensors())
    tensors["z"] = z
    tensors["rel"] = rel
    errs = check_grads(build, tensors, eps=1e-5, tol=1e-4)
    assert max(errs.values()) < 1e-4
