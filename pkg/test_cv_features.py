#!/usr/bin/env python3
"""
Tests for CV features and the correlation gate
"""

import json
import math

import numpy as np
import pytest

from battery_simulator import SimConfig, simulate_cycle
from cv_features import (
    FEATURE_NAMES,
    correlation_gate,
    extract_features,
    kurtosis,
    pearson,
    sample_stats,
    skewness,
    write_correlation_report,
)
from cycle_ingest import CvSegment, ProtocolConfig, split_cc_cv, ChargeCycle
from sindy_regression import LabeledDataset
from soh_errors import ConstantLabel, LengthMismatch, TooShort, ZeroVariance


def brute_skew(x):
    n = len(x)
    mu = sum(x) / n
    sd = math.sqrt(sum((v - mu) ** 2 for v in x) / (n - 1))
    return sum(((v - mu) / sd) ** 3 for v in x) / (n - 1)


def brute_kurt(x):
    n = len(x)
    mu = sum(x) / n
    sd = math.sqrt(sum((v - mu) ** 2 for v in x) / (n - 1))
    return n / ((n - 1) * (n - 2)) * sum(((v - mu) / sd) ** 4 for v in x) - 3.0


def decay_segment(i0=1.1, tau=300.0, duration=600.0, dt=1.0, scale=1.0):
    t = np.arange(0.0, duration + dt / 2, dt)
    return CvSegment(time_s=t, voltage_V=np.full(t.size, 4.2), current_A=scale * i0 * np.exp(-t / tau))


def test_sample_stats_examples():
    assert sample_stats([-1.0, 0.0, 1.0]) == (0.0, 1.0)
    assert sample_stats([5.0, 5.0, 5.0]) == (5.0, 0.0)
    x = [1.0, 2.0, 3.0, 4.0, 10.0]
    mu = sum(x) / 5
    sd = math.sqrt(sum((v - mu) ** 2 for v in x) / 4)
    assert sample_stats(x) == pytest.approx((mu, sd), rel=1e-12)
    with pytest.raises(TooShort):
        sample_stats([1.0, 2.0])


def test_skewness_and_kurtosis_examples():
    assert skewness([-2.0, 0.0, 2.0]) == pytest.approx(0.0, abs=1e-15)
    assert skewness([0.0, 0.0, 0.0, 10.0]) == pytest.approx(brute_skew([0.0, 0.0, 0.0, 10.0]), rel=1e-12)
    assert kurtosis([0.0, 0.0, 0.0, 10.0]) == pytest.approx(brute_kurt([0.0, 0.0, 0.0, 10.0]), rel=1e-12)
    with pytest.raises(ZeroVariance):
        skewness([3.0, 3.0, 3.0])
    with pytest.raises(ZeroVariance):
        kurtosis([3.0, 3.0, 3.0])


def test_kurtosis_of_large_normal_sample_is_near_zero():
    sample = np.random.default_rng(42).standard_normal(100_000)
    assert abs(kurtosis(sample)) < 0.1


def test_moments_match_direct_formula_and_are_invariant():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        x = rng.gamma(2.0, size=int(rng.integers(3, 40)))
        skew, kur = skewness(x), kurtosis(x)
        assert skew == pytest.approx(brute_skew(list(x)), rel=1e-10, abs=1e-12)
        assert kur == pytest.approx(brute_kurt(list(x)), rel=1e-10, abs=1e-12)
        assert skewness(x + 3.7) == pytest.approx(skew, abs=1e-10)
        assert kurtosis(x * 2.5) == pytest.approx(kur, abs=1e-10)


def test_features_of_exponential_decay():
    tau, i0 = 300.0, 1.1
    segment = decay_segment(i0=i0, tau=tau, duration=600.0)
    features = extract_features(segment, ProtocolConfig())
    first, last = segment.current_A[0], segment.current_A[-1]

    assert features.t_dur == 600.0
    assert features.delta_i == pytest.approx(first * (1 - math.exp(-600.0 / tau)), rel=1e-12)
    assert features.delta_i == first - last
    assert features.c_cv == pytest.approx(tau * (first - last) / 3600.0, rel=1e-4)
    assert features.sigma > 0
    assert features.c_cv <= segment.current_A.max() * features.t_dur / 3600.0


def test_features_against_simulator_ground_truth():
    config = SimConfig()
    samples, params = simulate_cycle(config, 50, 1.9)
    cycle = ChargeCycle(cell_id="cell1", cycle_index=50, **samples)
    _, segment = split_cc_cv(cycle, config.protocol)
    features = extract_features(segment, config.protocol)

    tau = params["cv_tau_s"]
    assert features.t_dur == pytest.approx(params["cv_duration_s"] - 1.0, abs=1e-6)
    analytic = tau * (segment.current_A[0] - config.protocol.cv_cutoff_A) / 3600.0
    assert features.c_cv == pytest.approx(analytic, rel=1e-3)
    assert features.delta_i == pytest.approx(segment.current_A[0] - config.protocol.cv_cutoff_A, rel=1e-12)


def test_feature_scaling_behaviour():
    base = extract_features(decay_segment())
    doubled = extract_features(decay_segment(scale=2.0))
    for name in ("mu", "sigma", "delta_i", "c_cv"):
        assert getattr(doubled, name) == pytest.approx(2.0 * getattr(base, name), rel=1e-12)
    for name in ("skew", "kur"):
        assert getattr(doubled, name) == pytest.approx(getattr(base, name), abs=1e-10)
    assert doubled.t_dur == base.t_dur


def test_two_sample_segment_is_too_short():
    segment = CvSegment(time_s=[0.0, 1.0], voltage_V=[4.2, 4.2], current_A=[1.0, 0.9])
    with pytest.raises(TooShort):
        extract_features(segment)


def test_extract_features_is_deterministic():
    a = extract_features(decay_segment()).as_array()
    b = extract_features(decay_segment()).as_array()
    assert a.tobytes() == b.tobytes()
    assert list(extract_features(decay_segment()).to_dict()) == list(FEATURE_NAMES)


def test_pearson_examples():
    x = np.arange(1.0, 11.0)
    assert pearson(x, 3 * x + 1) == pytest.approx(1.0, abs=1e-12)
    assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-12)

    a, b = [1.0, 2.0, 3.0, 4.0], [1.0, 3.0, 2.0, 5.0]
    ma, mb = sum(a) / 4, sum(b) / 4
    cov = sum((u - ma) * (v - mb) for u, v in zip(a, b))
    expected = cov / math.sqrt(sum((u - ma) ** 2 for u in a) * sum((v - mb) ** 2 for v in b))
    assert pearson(a, b) == pytest.approx(expected, rel=1e-12)

    with pytest.raises(LengthMismatch):
        pearson([1.0, 2.0, 3.0], [1.0, 2.0])
    with pytest.raises(ZeroVariance):
        pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


def test_pearson_affine_invariance():
    rng = np.random.default_rng(9)
    x, y = rng.normal(size=50), rng.normal(size=50)
    rho = pearson(x, y)
    assert pearson(2.5 * x + 4.0, y) == pytest.approx(rho, abs=1e-12)
    assert pearson(-0.5 * x + 1.0, y) == pytest.approx(-rho, abs=1e-12)


def make_dataset(columns, labels):
    return LabeledDataset(np.column_stack(columns), labels, feature_names=FEATURE_NAMES[:len(columns)])


def test_gate_excludes_noise_feature():
    rng = np.random.default_rng(21)
    soh = np.linspace(100.0, 80.0, 200)
    noise = rng.normal(size=200)
    columns = [2.0 * soh + 1.0, -soh, soh ** 2, noise, np.sqrt(soh), soh * 0.1, 3.0 - soh]
    report = correlation_gate(make_dataset(columns, soh), gate=0.8)

    assert abs(pearson(noise, soh)) < 0.8
    assert "kur" not in report.selected
    assert report.selected == ("mu", "sigma", "skew", "delta_i", "c_cv", "t_dur")
    assert all(-1.0 <= rho <= 1.0 for rho in report.rho.values())


def test_gate_selects_all_affine_features():
    soh = np.linspace(100.0, 75.0, 30)
    columns = [a * soh + b for a, b in zip([1, -2, 3, 0.5, -1, 4, 7], [0, 1, 2, 3, 4, 5, 6])]
    report = correlation_gate(make_dataset(columns, soh), gate=0.8)
    assert report.selected == FEATURE_NAMES


def test_zero_gate_selects_every_non_constant_feature(tmp_path):
    rng = np.random.default_rng(2)
    soh = np.linspace(100.0, 90.0, 40)
    columns = [rng.normal(size=40) for _ in range(6)] + [np.full(40, 0.125)]
    report = correlation_gate(make_dataset(columns, soh), gate=0.0)
    assert report.selected == FEATURE_NAMES[:6]
    assert report.constant == ("t_dur",)
    assert report.rho["t_dur"] == 0.0

    path = write_correlation_report(report, tmp_path / "corr.json")
    saved = json.loads(path.read_text(encoding="utf-8"))
    assert saved["selected"] == list(FEATURE_NAMES[:6])


def test_gate_rejects_constant_labels():
    columns = [np.arange(10.0) for _ in range(7)]
    with pytest.raises(ConstantLabel):
        correlation_gate(make_dataset(columns, np.full(10, 95.0)))
