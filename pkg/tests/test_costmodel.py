import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmsched.core import Modality, Request
from mmsched.costmodel import (
    EmptyIteration,
    ModelProfile,
    isolated_e2e,
    isolated_prefill,
    iteration_time,
    noise_factor,
    prefill_chunks,
    stage_costs,
)
from mmsched.workload import WorkloadSpec, generate

P0 = ModelProfile().without_noise()


def test_text_stages_are_zero():
    r = Request(0, Modality.TEXT, 0.0, 5000, 0, 20000.0, 10)
    assert stage_costs(P0, r) == (0.0, 0.0)
    assert stage_costs(ModelProfile(), r, np.random.default_rng(0)) == (0.0, 0.0)


def test_image_and_video_stage_costs():
    img = Request(0, Modality.IMAGE, 0.0, 50, 729, 1.0, 10)
    assert stage_costs(P0, img) == pytest.approx((0.07, 0.10), abs=1e-12)
    vid = Request(1, Modality.VIDEO, 0.0, 20, 128 * 196, 128.0, 10)
    assert stage_costs(P0, vid) == pytest.approx((1.124, 1.224), abs=1e-12)


def test_stage_noise_is_seeded_and_unbiased():
    img = Request(0, Modality.IMAGE, 0.0, 50, 729, 1.0, 10)
    prof = ModelProfile()
    a = stage_costs(prof, img, np.random.default_rng(3))
    b = stage_costs(prof, img, np.random.default_rng(3))
    assert a == b and a != (0.07, 0.10)
    rng = np.random.default_rng(0)
    draws = np.array([noise_factor(0.1, rng) for _ in range(20000)])
    assert abs(draws.mean() - 1.0) < 0.005
    assert abs(draws.std() / draws.mean() - 0.1) < 0.005
    assert noise_factor(0.0, rng) == 1.0


@pytest.mark.parametrize(
    "prefill, decodes, inline, expected",
    [
        (400, 0, 0.0, 0.013),
        (0, 8, 0.0, 0.009),
        # 1.0 + 0.005 + 2048 * 2e-5 + 4 * 5e-4
        (2048, 4, 1.0, 1.04796),
    ],
)
def test_iteration_time_examples(prefill, decodes, inline, expected):
    assert iteration_time(P0, prefill, decodes, inline) == pytest.approx(expected, abs=1e-12)


def test_iteration_time_errors():
    with pytest.raises(EmptyIteration):
        iteration_time(P0, 0, 0)
    with pytest.raises(ValueError):
        iteration_time(P0, -1, 2)


@given(st.integers(0, 10_000), st.integers(0, 500), st.integers(0, 100), st.integers(0, 100))
def test_iteration_time_monotone(p, d, dp, dd):
    if p + d == 0:
        p = 1
    assert iteration_time(P0, p + dp, d + dd) >= iteration_time(P0, p, d)


def test_isolated_e2e_text_example():
    r = Request(0, Modality.TEXT, 0.0, 400, 0, 1600.0, 100)
    ttft, e2e = isolated_e2e(P0, r, 2048)
    assert ttft == pytest.approx(0.013, abs=1e-12)
    assert e2e == pytest.approx(0.013 + 99 * 0.0055, abs=1e-12)


def test_isolated_e2e_image_example():
    # stage sizes chosen so preprocess + encode = 0.17 s
    r = Request(0, Modality.IMAGE, 0.0, 50, 729, 1.0, 64)
    pre, enc = stage_costs(P0, r)
    ttft, e2e = isolated_e2e(P0, r, 2048)
    assert ttft == pytest.approx(pre + enc + 0.005 + 0.01558, abs=1e-12)
    assert ttft == pytest.approx(0.19058, abs=1e-12)
    assert e2e == pytest.approx(0.53708, abs=1e-12)


def test_isolated_e2e_video_example():
    # 30050 tokens need 15 chunks of 2048; media_size tuned for 2.0 s of inline stages
    frames = (2.0 - 0.3) / 0.016
    r = Request(0, Modality.VIDEO, 0.0, 50, 30000, frames, 128)
    ttft, _ = isolated_e2e(P0, r, 2048)
    assert len(prefill_chunks(30050, 2048)) == 15
    assert ttft == pytest.approx(2.0 + 15 * 0.005 + 30050 * 2e-5, abs=1e-9)
    assert ttft == pytest.approx(2.676, abs=1e-9)


def test_prefill_chunks():
    assert prefill_chunks(4096, 2048) == [2048, 2048]
    assert prefill_chunks(4097, 2048) == [2048, 2048, 1]
    assert prefill_chunks(10, 2048) == [10]
    assert isolated_prefill(P0, 4097, 2048) == pytest.approx(3 * 0.005 + 4097 * 2e-5)


def test_profile_validation_and_roundtrip():
    prof = ModelProfile()
    assert ModelProfile.from_dict(prof.to_dict()) == prof
    with pytest.raises(ValueError):
        ModelProfile(prefill_cost=-1.0)
    bad = prof.to_dict()
    bad["preprocess"]["text"] = [0.1, 0.0]
    with pytest.raises(ValueError):
        ModelProfile.from_dict(bad)


def test_default_workload_lands_in_characterization_bands():
    """>= 99% of generated requests fall inside the per-modality TTFT and footprint bands."""
    spec = WorkloadSpec(mix=(1 / 3, 1 / 3, 1 / 3), rate=5.0, duration=600.0, seed=11)
    trace = generate(spec)
    ok = {m: [] for m in Modality}
    for r in trace.requests:
        ttft = isolated_e2e(P0, r, 2048)[0]
        fp = r.footprint
        if r.modality is Modality.TEXT:
            ok[r.modality].append(ttft < 0.1 and 10 <= fp <= 10_000)
        elif r.modality is Modality.IMAGE:
            ok[r.modality].append(ttft < 1.0 and 100 <= fp <= 1000)
        else:
            ok[r.modality].append(1.0 <= ttft <= 10.0 and fp <= 2e5)
    for m, flags in ok.items():
        assert len(flags) > 500
        assert np.mean(flags) >= 0.99, m
