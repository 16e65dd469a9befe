import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmsched.calibration import (
    DegenerateDesign,
    Estimators,
    InsufficientData,
    ProfileSample,
    empirical_quantile,
    estimate,
    fit_estimators,
    load_calibrations,
    ols_fit,
    pinball_loss,
    profile,
    profiling_trace,
    quantile_fit,
    save_calibrations,
)
from mmsched.core import Modality, Request
from mmsched.costmodel import ModelProfile
from mmsched.workload import Trace, WorkloadSpec

P0 = ModelProfile().without_noise()


def test_profile_examples():
    reqs = [
        Request(0, Modality.TEXT, 0.0, 400, 0, 1600.0, 10),
        Request(1, Modality.IMAGE, 0.0, 50, 729, 1.0, 10),
    ]
    s = profile(P0, Trace(reqs), 2048)
    t, i = s
    assert (t.preprocess_time, t.encode_time, t.footprint_tokens) == (0.0, 0.0, 400)
    assert t.prefill_time == pytest.approx(0.013, abs=1e-15)
    assert (i.preprocess_time, i.encode_time) == pytest.approx((0.07, 0.10), abs=1e-15)
    assert i.prefill_time == pytest.approx(0.005 + 779 * 2e-5, abs=1e-15)
    assert i.footprint_tokens == 779
    assert profile(P0, Trace([]), 2048) == []


def test_noiseless_ols_recovers_cost_model():
    # single-chunk prompts, where prefill time is exactly affine in prompt tokens
    x = np.arange(10, 2048, 37)
    reqs = [Request(k, Modality.TEXT, 0.0, int(p), 0, 4.0 * p, 5) for k, p in enumerate(x)]
    samples = profile(P0, Trace(reqs), 2048)
    y = np.array([s.first_token_time for s in samples])
    a, b = ols_fit(x, y)
    assert a == pytest.approx(0.005, abs=1e-9)
    assert b == pytest.approx(2e-5, abs=1e-12)
    assert float(((a + b * x - y) ** 2).sum()) < 1e-12


def test_ols_degenerate():
    with pytest.raises(DegenerateDesign):
        ols_fit([3, 3, 3], [1, 2, 3])


def test_constant_predictor_matches_sort_oracle():
    rng = np.random.default_rng(0)
    y = rng.normal(5.0, 1.0, 501)
    a, b = quantile_fit(np.full_like(y, 7.0), y, 0.9)
    # oracle: sort and take the smallest value with empirical CDF >= 0.9
    ys = np.sort(y)
    oracle = ys[int(np.ceil(0.9 * len(ys))) - 1]
    assert b == 0.0
    assert a == oracle == empirical_quantile(y, 0.9)


def test_quantile_coverage_symmetric_noise():
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 10, 1000)
    y = 1.0 + 2.0 * x + rng.normal(0, 1.0, 1000)
    a, b = quantile_fit(x, y, 0.9)
    assert np.mean(y - (a + b * x) <= 0) == pytest.approx(0.9, abs=0.03)
    assert b == pytest.approx(2.0, abs=0.15)
    # held-out draws from the same distribution
    x2 = rng.uniform(0, 10, 1000)
    y2 = 1.0 + 2.0 * x2 + rng.normal(0, 1.0, 1000)
    assert 0.87 <= np.mean(y2 <= a + b * x2) <= 0.93


def test_quantile_fit_beats_ols_on_pinball_loss():
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 1, 400)
    y = 3 * x + rng.exponential(1.0, 400)
    qa, qb = quantile_fit(x, y, 0.9)
    oa, ob = ols_fit(x, y)
    assert pinball_loss(y - (qa + qb * x), 0.9) < pinball_loss(y - (oa + ob * x), 0.9)


def test_pinball_loss_values():
    assert pinball_loss(np.array([1.0, -1.0]), 0.9) == pytest.approx((0.9 + 0.1) / 2)
    assert pinball_loss(np.zeros(4), 0.3) == 0.0


def _noisy_samples(modality, n, seed):
    spec = WorkloadSpec()
    trace = profiling_trace(spec, n, seed)
    reqs = [r for r in trace.requests if r.modality is modality]
    return profile(ModelProfile(), Trace(reqs), 2048, np.random.default_rng(seed))


@pytest.mark.parametrize("modality", [Modality.IMAGE, Modality.VIDEO])
def test_visual_estimator_coverage(modality):
    train = _noisy_samples(modality, 1000, 0)
    x = np.array([s.footprint_tokens for s in train], dtype=float)
    y = np.array([s.first_token_time for s in train])
    a, b = quantile_fit(x, y, 0.9)
    assert b >= 0
    assert 0.87 <= np.mean(y <= a + b * x) <= 0.93
    test = _noisy_samples(modality, 1000, 1)
    x2 = np.array([s.footprint_tokens for s in test], dtype=float)
    y2 = np.array([s.first_token_time for s in test])
    assert 0.87 <= np.mean(y2 <= a + b * x2) <= 0.93


def test_fit_estimators_minimums():
    def sample(m, fp, t):
        return ProfileSample(m, fp, 0, 0.0, 0.0, 0.0, t, fp)

    text = [sample(Modality.TEXT, 10, 0.1), sample(Modality.TEXT, 20, 0.2)]
    img = [sample(Modality.IMAGE, 700 + k, 0.2) for k in range(10)]
    vid = [sample(Modality.VIDEO, 20000 + k, 2.0) for k in range(10)]
    fit_estimators(text + img + vid)
    with pytest.raises(InsufficientData):
        fit_estimators(text[:1] + img + vid)
    with pytest.raises(InsufficientData):
        fit_estimators(text + img[:9] + vid)
    with pytest.raises(DegenerateDesign):
        fit_estimators(text + [sample(Modality.IMAGE, 700, 0.2)] * 10 + vid)


def test_estimate_examples():
    est = Estimators((0.005, 2e-5), (0.1, 1e-4), (1.0, 5e-5))
    r = Request(0, Modality.TEXT, 0.0, 400, 0, 1600.0, 5)
    e = estimate(est, r)
    assert e.prefill_latency == pytest.approx(0.013) and e.kv_footprint == 400
    img = Request(1, Modality.IMAGE, 0.0, 50, 729, 1.0, 5)
    assert estimate(Estimators((0, 0), (-5.0, 0.0), (0, 0)), img).kv_footprint == 779
    tiny = Request(2, Modality.TEXT, 0.0, 10, 0, 40.0, 5)
    e = estimate(Estimators((-1.0, 1e-5), (0, 0), (0, 0)), tiny)
    assert e.kv_footprint == 10 and e.prefill_latency == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10_000), st.integers(0, 200_000))
def test_estimate_footprint_is_exact(prompt, media):
    est = Estimators((0.005, 2e-5), (0.1, 1e-4), (1.0, 5e-5))
    r = Request(0, Modality.VIDEO if media else Modality.TEXT, 0.0, prompt, media, 1.0, 1)
    e = estimate(est, r)
    assert e.kv_footprint == prompt + media and e.prefill_latency >= 0


def test_default_calibration_slopes_nonnegative(default_calibration):
    est = default_calibration.estimators
    for m in Modality:
        assert est.line(m)[1] >= 0
    assert est.text[1] > 0


def test_calibration_file_roundtrip(tmp_path, default_calibration):
    path = tmp_path / "cal.json"
    save_calibrations(path, {"synthetic-7b": default_calibration})
    back = load_calibrations(path)
    assert set(back) == {"synthetic-7b"}
    assert back["synthetic-7b"].to_dict() == default_calibration.to_dict()
    json.loads(path.read_text())
