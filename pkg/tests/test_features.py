import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from diffusion_di.diffusion import NoiseSchedule, denoising_loss, forward_noise
from diffusion_di.features import (
    FEATURES,
    GRAY_BOX,
    GRAY_BOX_FEATURES,
    TIMESTEP_GRID,
    AccessError,
    ExtractionContext,
    extract_all,
    extract_denoising_loss,
    extract_gradient_masking,
    extract_multiple_loss,
    extract_noise_optimization,
    extract_pia,
    extract_pian,
    extract_secmi_stat,
    feature_columns,
    pian_normalize,
    top_fraction_mask,
)
from diffusion_di.io import read_feature_cache, read_sidecar, write_feature_cache
from toys import (
    ConstantDenoiser,
    CoupledTanhDenoiser,
    KnownCleanDenoiser,
    NaNDenoiser,
    ReplayDenoiser,
    ZeroDenoiser,
    flat,
    scalar_ddim_move,
    scalar_forward_noise,
)

SCHED = NoiseSchedule.linear()
AB = [float(v) for v in SCHED.alpha_bar]


def _rand(shape, seed):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def _tanh_model(seed=0, n=8):
    g = torch.Generator().manual_seed(seed)
    return CoupledTanhDenoiser(torch.rand(n, generator=g, dtype=torch.float64) + 0.5,
                               torch.randn(n, generator=g, dtype=torch.float64), k=0.1)


def _ids(n):
    return [f"s{i}" for i in range(n)]


def _replay_draws(ctx, ids, feature, count, shape):
    gens = ctx.generators(ids, feature)
    return [torch.stack([torch.randn(shape, generator=g, dtype=torch.float64) for g in gens]) for _ in range(count)]


class TestFeatureSets:
    def test_dimensions(self):
        assert len(feature_columns("all")) == 26
        assert len(feature_columns("gray_box")) == 14
        assert set(GRAY_BOX_FEATURES) == {"denoising_loss", "secmi", "pia", "pian", "multiple_loss"}

    def test_access_table(self):
        white = {n for n, s in FEATURES.items() if s.access != GRAY_BOX}
        assert white == {"gradient_masking", "noise_optimization"}

    def test_column_names_stable(self):
        cols = feature_columns("all")
        assert cols[:4] == ["denoising_loss", "secmi", "pia", "pian"]
        assert cols[4:14] == [f"gm_t{t:03d}" for t in TIMESTEP_GRID]
        assert cols[-2:] == ["no_error", "no_delta"]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            feature_columns([])


class TestDenoisingLoss:
    def test_oracle_zero(self):
        x = _rand((3, 1, 4, 4), 0)
        ctx = ExtractionContext(KnownCleanDenoiser(x, AB), SCHED)
        assert np.allclose(extract_denoising_loss(x, ctx, _ids(3)), 0, atol=1e-20)

    def test_zero_denoiser(self):
        x = _rand((200, 1, 8, 8), 0)
        v = extract_denoising_loss(x, ExtractionContext(ZeroDenoiser(), SCHED), _ids(200))
        assert v.shape == (200, 1)
        assert v.mean() == pytest.approx(1.0, abs=0.1)
        assert np.all(np.abs(v - 1) < 0.5)

    def test_is_mean_of_five_draws(self):
        m, x = _tanh_model(), _rand((2, 2, 2, 2), 1)
        ctx = ExtractionContext(m, SCHED)
        draws = _replay_draws(ctx, _ids(2), "denoising_loss", 5, x.shape[1:])
        expected = torch.stack([denoising_loss(x, 100, e, m, SCHED) for e in draws]).mean(0)
        np.testing.assert_allclose(extract_denoising_loss(x, ctx, _ids(2))[:, 0], expected.numpy(), atol=1e-12)


class TestSecMI:
    def test_constant_denoiser_zero(self):
        x, c = _rand((3, 1, 4, 4), 0), _rand((1, 1, 4, 4), 1)
        v = extract_secmi_stat(x, ExtractionContext(ConstantDenoiser(c), SCHED))
        assert np.all(v < 1e-8)

    def test_zero_denoiser_closed_form(self):
        # f = 0 makes every step a pure rescaling, so the round trip is exact
        x = _rand((2, 1, 3, 3), 0)
        v = extract_secmi_stat(x, ExtractionContext(ZeroDenoiser(), SCHED))
        np.testing.assert_allclose(v, 0.0, atol=1e-6)

    def test_scalar_oracle(self):
        m, x = _tanh_model(), _rand((1, 2, 2, 2), 2)
        z = flat(x)
        for t in range(0, 100, 10):
            z = scalar_ddim_move(m, z, t, t + 10, AB)
        up = scalar_ddim_move(m, z, 100, 101, AB)
        back = scalar_ddim_move(m, up, 101, 100, AB)
        expected = sum((back[i] - z[i]) ** 2 for i in range(8)) / 8
        got = extract_secmi_stat(x, ExtractionContext(m, SCHED))[0, 0]
        assert got == pytest.approx(expected, abs=1e-6)
        assert got > 0

    def test_bad_stride(self):
        with pytest.raises(ValueError):
            extract_secmi_stat(_rand((1, 1, 2, 2), 0), ExtractionContext(ZeroDenoiser(), SCHED, secmi_stride=7))


def _scalar_pia(model, z, t, p, normalize=None):
    e0 = model.value(z, 0)
    if normalize is not None:
        l1 = sum(abs(v) for v in e0)
        e0 = [normalize * v / l1 for v in e0]
    zt = [math.sqrt(AB[t]) * z[i] + math.sqrt(1 - AB[t]) * e0[i] for i in range(len(z))]
    et = model.value(zt, t)
    return (sum(abs(e0[i] - et[i]) ** p for i in range(len(z))) / len(z)) ** (1 / p)


class TestPIA:
    def test_constant_zero(self):
        x, c = _rand((3, 1, 4, 4), 0), _rand((1, 1, 4, 4), 1)
        assert np.all(extract_pia(x, ExtractionContext(ConstantDenoiser(c), SCHED)) == 0)

    def test_two_element_oracle(self):
        m, x = _tanh_model(3, n=2), _rand((4, 1, 1, 2), 5)
        got = extract_pia(x, ExtractionContext(m, SCHED))[:, 0]
        for i in range(4):
            assert got[i] == pytest.approx(_scalar_pia(m, flat(x[i]), 200, 5.0), abs=1e-9)

    def test_eight_element_oracle(self):
        m, x = _tanh_model(), _rand((1, 2, 2, 2), 6)
        assert extract_pia(x, ExtractionContext(m, SCHED))[0, 0] == pytest.approx(
            _scalar_pia(m, flat(x), 200, 5.0), abs=1e-6)


class TestPIAN:
    def test_l1_norm_100_predictions(self):
        for seed in range(100):
            f = _rand((1, 3, 4, 4), seed) * (seed + 1)
            out = pian_normalize(f)
            assert out.abs().sum().item() == pytest.approx(48 * math.sqrt(math.pi / 2), abs=1e-4)

    def test_fixed_point(self):
        m, x = _tanh_model(), _rand((1, 2, 2, 2), 6)
        e0 = torch.tensor(m.value(flat(x), 0), dtype=torch.float64)
        target = 8 * math.sqrt(math.pi / 2)
        scale = target / e0.abs().sum().item()
        fixed = CoupledTanhDenoiser(m.a, m.s, m.k)
        # a denoiser whose t=0 output already has the target norm
        fixed.forward = lambda z, t, y=None, base=m: base(z, t) * (scale if int(t[0]) == 0 else 1.0)
        ctx = ExtractionContext(fixed, SCHED)
        assert extract_pian(x, ctx)[0, 0] == pytest.approx(extract_pia(x, ctx)[0, 0], abs=1e-12)

    def test_scalar_oracle(self):
        m, x = _tanh_model(), _rand((1, 2, 2, 2), 7)
        got = extract_pian(x, ExtractionContext(m, SCHED))[0, 0]
        assert got == pytest.approx(_scalar_pia(m, flat(x), 200, 5.0, 8 * math.sqrt(math.pi / 2)), abs=1e-6)

    def test_gaussian_scaling_factor(self):
        # E|eps| = sqrt(2/pi): the gaussian target leaves standard-normal predictions almost unscaled
        f = _rand((1, 1, 64, 64), 0)
        ratio = (pian_normalize(f, "gaussian") / f).mean().item()
        assert ratio == pytest.approx(1.0, rel=0.05)
        ratio = (pian_normalize(f, "paper") / f).mean().item()
        assert ratio == pytest.approx(math.pi / 2, rel=0.05)

    def test_zero_prediction_marks_failure(self):
        x = _rand((2, 1, 2, 2), 0)
        fm = extract_all(x, ExtractionContext(ZeroDenoiser(), SCHED), _ids(2), ["pian"])
        assert set(fm.failures) == {"s0", "s1"}


class TestMultipleLoss:
    def test_replay_oracle_zeros(self):
        x = _rand((3, 1, 4, 4), 0)
        ctx = ExtractionContext(None, SCHED)
        draws = _replay_draws(ctx, _ids(3), "multiple_loss", 10, x.shape[1:])
        ctx.model = ReplayDenoiser(dict(zip(TIMESTEP_GRID, draws)))
        v = extract_multiple_loss(x, ctx, _ids(3))
        assert v.shape == (3, 10) and np.all(v == 0)

    def test_t100_matches_single_draw_loss(self):
        m, x = _tanh_model(), _rand((1, 2, 2, 2), 1).expand(4000, -1, -1, -1)
        ctx = ExtractionContext(m, SCHED)
        ml = extract_multiple_loss(x, ctx, _ids(4000))[:, 1]
        single = denoising_loss(x, 100, _rand(x.shape, 9), m, SCHED).numpy()
        assert ml.mean() == pytest.approx(single.mean(), rel=0.05)
        assert ml.std() == pytest.approx(single.std(), rel=0.1)


class TestGradientMasking:
    def test_hand_mask(self):
        g = torch.tensor([5.0, 1, 2, 3, 4, 0, 1, 2]).view(1, 2, 2, 2)
        mask = top_fraction_mask(g, 0.2)
        assert mask.sum() == 2
        assert sorted(g[mask].tolist()) == [4.0, 5.0]

    def test_ties_by_flat_index(self):
        g = torch.tensor([[1.0, 3, 3, 3, 0]])
        assert top_fraction_mask(g, 0.4)[0].tolist() == [False, True, True, False, False]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 200), st.integers(0, 2**31), st.booleans())
    def test_matches_brute_force_topk(self, n, seed, ties):
        rng = np.random.default_rng(seed)
        vals = rng.integers(0, 4, n).astype(float) if ties else rng.random(n)
        mask = top_fraction_mask(torch.tensor(vals).view(1, -1), 0.2)[0].numpy()
        m = max(1, int(round(0.2 * n)))
        assert mask.sum() == m
        order = sorted(range(n), key=lambda i: (-vals[i], i))
        assert set(np.flatnonzero(mask)) == set(order[:m])

    def test_zero_denoiser(self):
        x = _rand((2, 1, 4, 4), 0)
        ctx = ExtractionContext(ZeroDenoiser(), SCHED)
        got = extract_gradient_masking(x, ctx, _ids(2))
        draws = _replay_draws(ctx, _ids(2), "gradient_masking", 10, x.shape[1:])
        for j, t in enumerate(TIMESTEP_GRID):
            # zero gradient everywhere: mask is the first round(0.2*16) flat positions
            z = forward_noise(x, t, draws[j], SCHED)
            d = (draws[j] - z).flatten(1)[:, :3]
            np.testing.assert_allclose(got[:, j], d.pow(2).mean(1).numpy(), atol=1e-12)

    def test_scalar_oracle(self):
        m, x = _tanh_model(), _rand((1, 2, 2, 2), 3)
        ctx = ExtractionContext(m, SCHED)
        got = extract_gradient_masking(x, ctx, _ids(1))[0]
        draws = _replay_draws(ctx, _ids(1), "gradient_masking", 10, x.shape[1:])
        for j, t in enumerate(TIMESTEP_GRID):
            eps = flat(draws[j])
            z = scalar_forward_noise(flat(x), t, eps, AB)
            g = [abs(v) for v in m.loss_grad(z, t, eps)]
            top = sorted(range(8), key=lambda i: (-g[i], i))[:2]
            zh = [eps[i] if i in top else z[i] for i in range(8)]
            f = m.value(zh, t)
            expected = sum(((eps[i] - z[i]) - f[i]) ** 2 for i in top) / 2
            assert got[j] == pytest.approx(expected, abs=1e-6)

    def test_gray_box_refused(self):
        ctx = ExtractionContext(ZeroDenoiser(), SCHED, access=GRAY_BOX)
        with pytest.raises(AccessError):
            extract_gradient_masking(_rand((1, 1, 2, 2), 0), ctx, _ids(1))
        with pytest.raises(AccessError):
            extract_all(_rand((1, 1, 2, 2), 0), ctx, _ids(1), "all")


class TestNoiseOptimization:
    def test_oracle_zero(self):
        # optimisation runs one sample at a time, so the replayed noise is a single sample's
        x = _rand((1, 1, 3, 3), 0)
        ctx = ExtractionContext(None, SCHED)
        (eps,) = _replay_draws(ctx, _ids(1), "noise_optimization", 1, x.shape[1:])
        ctx.model = ReplayDenoiser({100: eps})
        v = extract_noise_optimization(x, ctx, _ids(1))
        np.testing.assert_allclose(v, 0.0, atol=1e-20)

    def test_error_not_above_start(self):
        m, x = _tanh_model(), _rand((5, 2, 2, 2), 4)
        ctx = ExtractionContext(m, SCHED)
        v = extract_noise_optimization(x, ctx, _ids(5))
        (eps,) = _replay_draws(ctx, _ids(5), "noise_optimization", 1, x.shape[1:])
        start = denoising_loss(x, 100, eps, m, SCHED).numpy()
        assert np.all(v[:, 0] <= start + 1e-12)
        assert np.all(v[:, 1] > 0)


class TestExtractAll:
    def test_shape_order_and_determinism(self):
        m, x = _tanh_model(), _rand((5, 2, 2, 2), 0)
        ctx = ExtractionContext(m, SCHED)
        a = extract_all(x, ctx, _ids(5))
        b = extract_all(x, ctx, _ids(5))
        assert a.values.shape == (5, 26) and a.names == feature_columns("all")
        np.testing.assert_array_equal(a.values, b.values)
        assert not a.failures

    def test_batch_and_subset_independent(self):
        m, x = _tanh_model(), _rand((5, 2, 2, 2), 0)
        ctx = ExtractionContext(m, SCHED)
        full = extract_all(x, ctx, _ids(5), batch_size=5)
        parts = extract_all(x, ctx, _ids(5), batch_size=2)
        one = extract_all(x[3:4], ctx, ["s3"])
        np.testing.assert_allclose(full.values, parts.values, atol=1e-12)
        np.testing.assert_allclose(one.values[0], full.values[3], atol=1e-12)

    def test_seed_changes_noise(self):
        m, x = _tanh_model(), _rand((2, 2, 2, 2), 0)
        a = extract_all(x, ExtractionContext(m, SCHED, seed=0), _ids(2), ["denoising_loss"])
        b = extract_all(x, ExtractionContext(m, SCHED, seed=1), _ids(2), ["denoising_loss"])
        assert not np.array_equal(a.values, b.values)

    def test_gray_box_set(self):
        fm = extract_all(_rand((2, 2, 2, 2), 0), ExtractionContext(_tanh_model(), SCHED, access=GRAY_BOX),
                         _ids(2), "gray_box")
        assert fm.values.shape == (2, 14)

    def test_failures_recorded_and_dropped(self):
        fm = extract_all(_rand((2, 1, 2, 2), 0), ExtractionContext(NaNDenoiser(), SCHED), _ids(2), ["pia"])
        assert set(fm.failures) == {"s0", "s1"}
        assert len(fm.drop_invalid()) == 0

    def test_input_validation(self):
        ctx = ExtractionContext(ZeroDenoiser(), SCHED)
        with pytest.raises(ValueError):
            extract_all(_rand((2, 1, 2, 2), 0), ctx, ["a", "a"])
        with pytest.raises(ValueError):
            extract_all(_rand((2, 1, 2, 2), 0), ctx, ["a"])


def test_feature_cache_round_trip(tmp_path):
    m, x = _tanh_model(), _rand((4, 2, 2, 2), 0)
    fm = extract_all(x, ExtractionContext(m, SCHED), ["d", "b", "c", "a"])
    fm.split = ["P", "P", "U", "U"]
    fm.is_member = np.array([True, True, False, False])
    digest = write_feature_cache(tmp_path / "f.csv", fm, {"seed": 0})
    back = read_feature_cache(tmp_path / "f.csv")
    assert back.sample_ids == ["a", "b", "c", "d"]
    order = [3, 1, 2, 0]
    np.testing.assert_array_equal(back.values, fm.values[order])
    assert back.split == ["U", "P", "U", "P"] and back.is_member.tolist() == [False, True, False, True]
    side = read_sidecar(tmp_path / "f.csv")
    assert side["csv_sha256"] == digest and side["feature_names"] == fm.names
    assert (tmp_path / "f.csv").read_text().splitlines()[0].startswith("sample_id,split,is_member,denoising_loss")
