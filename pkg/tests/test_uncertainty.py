import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from calibseg.errors import ValidationError
from calibseg.uncertainty import ProbMapSampleSet, binarize_samples, decompose, draw_samples

from helpers import tiny_model


def test_identical_maps_have_no_epistemic_part():
    p = np.full((5, 3, 4), 0.3)
    u = decompose(ProbMapSampleSet(p))
    assert np.all(u.epistemic == 0)
    np.testing.assert_allclose(u.aleatoric, 0.3 * 0.7, atol=1e-16)


def test_two_extreme_samples():
    u = decompose(ProbMapSampleSet(np.array([[[0.0]], [[1.0]]])))
    assert u.aleatoric[0, 0] == 0.0
    assert u.epistemic[0, 0] == 0.25
    assert u.predictive[0, 0] == 0.25


@settings(max_examples=100, deadline=None)
@given(s=st.integers(1, 16), seed=st.integers(0, 2 ** 32 - 1))
def test_total_variance_identity(s, seed):
    maps = np.random.default_rng(seed).random((s, 8, 8))
    u = decompose(ProbMapSampleSet(maps))
    p_bar = maps.mean(0)
    np.testing.assert_allclose(u.predictive, p_bar * (1 - p_bar), atol=1e-12, rtol=0)
    np.testing.assert_array_equal(u.predictive, u.aleatoric + u.epistemic)
    for m in (u.aleatoric, u.epistemic, u.predictive):
        assert np.all(m >= 0) and np.all(m <= 0.25)
    perm = np.random.default_rng(seed).permutation(s)
    np.testing.assert_allclose(decompose(ProbMapSampleSet(maps[perm])).aleatoric, u.aleatoric, atol=1e-15)


def test_brute_force_decomposition(rng):
    maps = rng.random((6, 2, 3))
    u = decompose(ProbMapSampleSet(maps))
    for i in range(2):
        for j in range(3):
            ps = [maps[k, i, j] for k in range(6)]
            mean = sum(ps) / 6
            assert u.aleatoric[i, j] == pytest.approx(sum(p * (1 - p) for p in ps) / 6, abs=1e-15)
            assert u.epistemic[i, j] == pytest.approx(sum((p - mean) ** 2 for p in ps) / 6, abs=1e-15)


def test_sample_set_validation():
    with pytest.raises(ValidationError):
        ProbMapSampleSet(np.full((2, 3, 3), 1.5))
    with pytest.raises(ValidationError):
        ProbMapSampleSet(np.zeros((0, 3, 3)))
    assert ProbMapSampleSet(np.zeros((3, 3))).sample_count == 1


def test_binarize_threshold_and_ties(rng):
    out = binarize_samples(ProbMapSampleSet(np.array([np.full((3, 3), 0.7), np.full((3, 3), 0.5)])))
    assert np.all(out[0] == 1) and np.all(out[1] == 1)
    maps = rng.random((4, 5, 5))
    for m, b in zip(maps, binarize_samples(ProbMapSampleSet(maps))):
        expected = [[1 if m[i, j] >= 0.5 else 0 for j in range(5)] for i in range(5)]
        np.testing.assert_array_equal(b, expected)


class ConstantModel:
    def __init__(self, p):
        self.p = p

    def sample_prob_maps(self, pixels, samples, generator):
        return np.full((samples,) + np.shape(pixels), self.p)


def test_draw_samples_deterministic_model():
    s = draw_samples(ConstantModel(0.2), np.zeros((8, 8)), 7)
    assert s.sample_count == 7
    assert np.all(s.maps == s.maps[0])


def test_draw_samples_reproducible_with_seed():
    model = tiny_model(16)
    pix = np.random.default_rng(0).random((16, 16))
    a = draw_samples(model, pix, 5, torch.Generator().manual_seed(3))
    b = draw_samples(model, pix, 5, torch.Generator().manual_seed(3))
    np.testing.assert_array_equal(a.maps, b.maps)
    assert not np.allclose(a.maps[0], a.maps[1])  # fresh noise per sample
