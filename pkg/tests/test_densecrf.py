import itertools
import math

import numpy as np
import pytest

from cfcn.densecrf import (CrfParams, brute_force_map, energy, kernel_matrix, mean_field, pairwise_kernel,
                           random_search, refine, unaries_from_probs, write_trials)
from cfcn.evalmetrics import BinaryMask, dice
from cfcn.volgrid import LabelVolume, ProbVolume, Volume
from oracles import crf_energy_direct, crf_map_enumerate

TWO = Volume(np.zeros((2, 1, 1)), (1.0, 1.0, 1.0))
TWO_U = np.array([[0.1, 2.0], [1.5, 0.2]]).reshape(2, 1, 1, 2)
TWO_P = CrfParams(w_pos=1.0, sigma_pos=1.0, w_bil=0.0)


def _labels(*x):
    return LabelVolume(np.array(x, np.uint8).reshape(2, 1, 1))


def _random_instance(rng, shape, scale=1.0):
    u = rng.exponential(scale, size=shape + (2,))
    v = Volume(rng.random(shape), tuple(rng.choice([0.8, 1.0, 1.5], 3)))
    return u, v


class TestUnaries:
    def test_values(self):
        p = ProbVolume(np.array([1.0, 0.0, 0.5, 0.5]).reshape(2, 1, 1, 2))
        u = unaries_from_probs(p)
        assert u[0, 0, 0, 0] == 0.0
        assert u[0, 0, 0, 1] == pytest.approx(-math.log(1e-7))
        assert u[1, 0, 0, 0] == pytest.approx(math.log(2))


class TestKernel:
    def test_adjacent_same_intensity(self):
        k = pairwise_kernel((0, 0, 0), (1, 0, 0), TWO, CrfParams(w_pos=1, sigma_pos=1, w_bil=0))
        assert k == pytest.approx(math.exp(-0.5), abs=1e-15)

    def test_zero_weights_and_intensity_limit(self):
        v = Volume(np.array([0.0, 1e6]).reshape(2, 1, 1))
        assert pairwise_kernel((0, 0, 0), (1, 0, 0), v, CrfParams(w_pos=0, w_bil=0)) == 0.0
        p = CrfParams(w_pos=2.0, w_bil=5.0, sigma_pos=1.5)
        assert pairwise_kernel((0, 0, 0), (1, 0, 0), v, p) == pytest.approx(2 * math.exp(-1 / (2 * 1.5**2)))

    def test_millimetre_positions_and_symmetry(self):
        rng = np.random.default_rng(0)
        v = Volume(rng.random((3, 2, 2)), (2.0, 1.0, 0.5))
        p = CrfParams(w_pos=1.3, w_bil=0.7, sigma_pos=1.7, sigma_bil=2.2, sigma_int=0.3)
        K = kernel_matrix(v, p)
        idx = list(itertools.product(range(3), range(2), range(2)))
        for a, i in enumerate(idx):
            for b, j in enumerate(idx):
                if a != b:
                    assert K[a, b] == pytest.approx(pairwise_kernel(i, j, v, p), rel=1e-13)
                    assert pairwise_kernel(i, j, v, p) == pairwise_kernel(j, i, v, p)
        d2 = 4.0  # one step along x at 2 mm
        assert pairwise_kernel((0, 0, 0), (1, 0, 0), v, CrfParams(w_pos=1, sigma_pos=1, w_bil=0)) == \
            pytest.approx(math.exp(-d2 / 2))


class TestEnergy:
    def test_worked_table(self):
        table = {(0, 0): 1.6, (0, 1): 0.1 + 0.2 + math.exp(-0.5), (1, 0): 2.0 + 1.5 + math.exp(-0.5),
                 (1, 1): 2.2}
        for lab, e in table.items():
            assert energy(_labels(*lab), TWO_U, TWO, TWO_P) == pytest.approx(e, abs=1e-12)
        assert energy(_labels(0, 1), TWO_U, TWO, TWO_P) == pytest.approx(0.90653066, abs=1e-8)

    def test_matches_pair_loop(self):
        rng = np.random.default_rng(1)
        p = CrfParams(w_pos=0.8, w_bil=1.4, sigma_pos=1.2, sigma_bil=2.0, sigma_int=0.4)
        for _ in range(5):
            u, v = _random_instance(rng, (3, 2, 2))
            lab = rng.integers(0, 2, (3, 2, 2)).astype(np.uint8)
            assert energy(LabelVolume(lab), u, v, p) == pytest.approx(
                crf_energy_direct(lab, u, v.data, v.spacing, p), rel=1e-12)

    def test_uniform_labels_and_zero_weights(self):
        rng = np.random.default_rng(2)
        u, v = _random_instance(rng, (2, 2, 2))
        ones = LabelVolume(np.ones((2, 2, 2), np.uint8))
        assert energy(ones, u, v, CrfParams()) == pytest.approx(u[..., 1].sum())
        lab = LabelVolume(rng.integers(0, 2, (2, 2, 2)).astype(np.uint8))
        unary = np.take_along_axis(u, lab.labels[..., None].astype(int), axis=3).sum()
        assert energy(lab, u, v, CrfParams(w_pos=0, w_bil=0)) == pytest.approx(unary)

    def test_label_permutation_symmetry(self):
        rng = np.random.default_rng(3)
        u, v = _random_instance(rng, (2, 2, 2))
        lab = LabelVolume(rng.integers(0, 2, (2, 2, 2)).astype(np.uint8))
        flipped = LabelVolume(1 - lab.labels)
        assert energy(lab, u, v, CrfParams()) == pytest.approx(energy(flipped, u[..., ::-1], v, CrfParams()))

    def test_size_limit(self):
        with pytest.raises(ValueError, match="use mean_field"):
            energy(LabelVolume(np.zeros((20, 20, 20), np.uint8)), np.zeros((20, 20, 20, 2)),
                   Volume(np.zeros((20, 20, 20))), CrfParams())


class TestBruteForce:
    def test_worked_instance(self):
        assert brute_force_map(TWO_U, TWO, TWO_P).labels.ravel().tolist() == [0, 1]

    def test_zero_pairwise_and_single_voxel(self):
        rng = np.random.default_rng(4)
        u, v = _random_instance(rng, (2, 2, 2))
        out = brute_force_map(u, v, CrfParams(w_pos=0, w_bil=0))
        np.testing.assert_array_equal(out.labels, np.argmin(u, axis=3))
        one = Volume(np.zeros((1, 1, 1)))
        assert brute_force_map(np.array([3.0, 1.0]).reshape(1, 1, 1, 2), one, CrfParams()).labels.item() == 1

    @pytest.mark.parametrize("shape,nl", [((2, 2, 2), 2), ((3, 1, 2), 3), ((1, 1, 5), 2)])
    def test_matches_enumeration(self, shape, nl):
        rng = np.random.default_rng(5)
        p = CrfParams(w_pos=1.1, w_bil=0.9, sigma_pos=1.0, sigma_bil=1.5, sigma_int=0.5)
        for _ in range(4):
            u = rng.exponential(1.0, size=shape + (nl,))
            v = Volume(rng.random(shape))
            ref, ref_e = crf_map_enumerate(u, v.data, v.spacing, p)
            out = brute_force_map(u, v, p)
            np.testing.assert_array_equal(out.labels, ref)

    def test_ties_go_to_smallest_labeling(self):
        u = np.zeros((2, 1, 1, 2))
        assert brute_force_map(u, TWO, TWO_P).labels.ravel().tolist() == [0, 0]

    def test_enumeration_limit(self):
        with pytest.raises(ValueError):
            brute_force_map(np.zeros((4, 4, 2, 2)), Volume(np.zeros((4, 4, 2))), CrfParams(), max_labelings=2**20)


def _dominant_instance(rng, shape=(3, 3, 3), p=CrfParams()):
    v = Volume(rng.random(shape), (1.0, 1.0, 1.5))
    mass = kernel_matrix(v, p).sum(axis=1).reshape(shape)
    u = np.zeros(shape + (2,))
    # gap of at least 10x the pairwise mass at each voxel, on a random side
    gap = 10 * mass * rng.uniform(1.0, 2.0, shape)
    side = rng.integers(0, 2, shape)
    u[..., 0] = np.where(side == 1, gap, 0.0)
    u[..., 1] = np.where(side == 0, gap, 0.0)
    return u + rng.random(shape + (1,)), v


class TestMeanField:
    def test_zero_coupling_is_argmax(self):
        rng = np.random.default_rng(6)
        p = ProbVolume.from_foreground(rng.random((3, 4, 5)))
        u = unaries_from_probs(p)
        Q, lab = mean_field(u, Volume(rng.random((3, 4, 5))), CrfParams(w_pos=0, w_bil=0, iterations=7))
        np.testing.assert_array_equal(lab.labels, p.argmax())
        np.testing.assert_allclose(Q.probs, p.probs, atol=1e-6)

    def test_zero_iterations_is_unary_argmax(self):
        rng = np.random.default_rng(7)
        u, v = _random_instance(rng, (2, 3, 2))
        _, lab = mean_field(u, v, CrfParams(), iterations=0)
        np.testing.assert_array_equal(lab.labels, np.argmin(u, axis=3))

    def test_rows_normalized(self):
        rng = np.random.default_rng(8)
        u, v = _random_instance(rng, (3, 3, 3))
        for it in range(1, 4):
            Q, _ = mean_field(u, v, CrfParams(), iterations=it)
            assert np.abs(Q.probs.sum(axis=3) - 1).max() < 1e-6 and Q.probs.min() >= 0

    def test_unary_dominant_equals_brute_force(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            u, v = _dominant_instance(rng)
            np.testing.assert_array_equal(mean_field(u, v, CrfParams())[1].labels,
                                          brute_force_map(u, v, CrfParams()).labels)

    def test_energy_not_worse_than_unary_argmax_mostly(self):
        rng = np.random.default_rng(10)
        p = CrfParams(w_pos=0.5, w_bil=0.5, sigma_pos=1.0, sigma_bil=1.5, sigma_int=0.3)
        ok = 0
        for _ in range(30):
            u, v = _random_instance(rng, (2, 2, 2))
            mf = mean_field(u, v, p)[1]
            start = LabelVolume(np.argmin(u, axis=3).astype(np.uint8))
            ok += energy(mf, u, v, p) <= energy(start, u, v, p) + 1e-12
        assert ok >= 27

    def test_long_window_is_exact(self):
        rng = np.random.default_rng(11)
        p = CrfParams(w_pos=2, w_bil=3, sigma_pos=1.5, sigma_bil=2.0, sigma_int=0.2)
        u, v = _random_instance(rng, (7, 6, 5))
        qe = mean_field(u, v, p, method="exact")[0].probs
        qw = mean_field(u, v, p, method="window", max_radius=None, truncate=10.0)[0].probs
        assert np.abs(qe - qw).max() < 1e-6

    @pytest.mark.parametrize("shape", [(10, 10, 8), (16, 14, 10)])
    def test_three_sigma_window_matches_exact(self, shape):
        # a soft ellipsoid, like a network output around an organ
        rng = np.random.default_rng(17)
        g = np.indices(shape).astype(float)
        half = np.array(shape, float)[:, None, None, None]
        r = np.sqrt((((g - half / 2) / (half / 3)) ** 2).sum(0))
        fg = np.clip(1 / (1 + np.exp(3 * (r - 1))) + rng.normal(0, 0.1, shape), 0.01, 0.99)
        v = Volume((r < 1) * 0.6 + 0.2 + rng.normal(0, 0.05, shape), (1.0, 1.0, 1.5))
        u = unaries_from_probs(ProbVolume.from_foreground(fg, v.spacing))
        for p in (CrfParams(w_pos=0.3, w_bil=0.5),
                  CrfParams(w_pos=0.5, w_bil=0.5, sigma_pos=1.5, sigma_bil=2.0, sigma_int=0.2)):
            qe = mean_field(u, v, p, method="exact")[0].probs
            qw = mean_field(u, v, p, method="window", max_radius=None)[0].probs
            assert np.abs(qe - qw).max() < 1e-3


class TestRefine:
    def test_confident_probs_unchanged(self):
        rng = np.random.default_rng(12)
        fg = np.where(rng.random((6, 6, 6)) < 0.5, 0.995, 0.005)
        p = ProbVolume.from_foreground(fg)
        out = refine(p, Volume(rng.random((6, 6, 6))), CrfParams(w_pos=0.5, w_bil=0.5))
        np.testing.assert_array_equal(out.labels, p.argmax())

    def test_salt_noise_removed(self):
        fg = np.full((5, 5, 5), 0.9)
        fg[2, 2, 2] = 0.2
        p = ProbVolume.from_foreground(fg)
        v = Volume(np.zeros((5, 5, 5)))
        params = CrfParams(w_pos=3.0, w_bil=0.0, sigma_pos=1.0)
        out = refine(p, v, params)
        assert out.labels.all()
        # the flipped labeling is the lower-energy one
        u = unaries_from_probs(p)
        noisy = LabelVolume((fg > 0.5).astype(np.uint8))
        assert energy(out, u, v, params) < energy(noisy, u, v, params)

    def test_fixed_point_on_own_output(self):
        rng = np.random.default_rng(13)
        fg = np.clip(rng.normal(0.5, 0.3, (6, 6, 6)), 0, 1)
        v = Volume(rng.random((6, 6, 6)))
        params = CrfParams(w_pos=1.0, w_bil=1.0, sigma_int=0.3)
        first = refine(ProbVolume.from_foreground(fg), v, params)
        hard = ProbVolume.from_foreground(np.where(first.labels == 1, 0.999, 0.001))
        np.testing.assert_array_equal(refine(hard, v, params).labels, first.labels)

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            refine(ProbVolume.from_foreground(np.zeros((2, 2, 2))), Volume(np.zeros((2, 2, 3))), CrfParams())


class TestParams:
    def test_validation_and_json(self, tmp_path):
        with pytest.raises(ValueError):
            CrfParams(sigma_pos=0)
        with pytest.raises(ValueError):
            CrfParams(w_bil=-1)
        with pytest.raises(ValueError):
            CrfParams(iterations=0)
        p = CrfParams(w_pos=0.1, sigma_int=0.05)
        p.save(tmp_path / "p.json")
        assert CrfParams.load(tmp_path / "p.json") == p


def _search_cases(rng):
    cases = []
    for _ in range(2):
        truth = np.zeros((8, 8, 4), np.uint8)
        truth[2:6, 2:6] = 1
        fg = np.clip(truth * 0.7 + 0.15 + rng.normal(0, 0.2, truth.shape), 0, 1)
        cases.append((ProbVolume.from_foreground(fg), Volume(truth + rng.normal(0, 0.1, truth.shape)),
                      LabelVolume(truth)))
    return cases


class TestRandomSearch:
    def test_budget_one_and_determinism(self, tmp_path):
        cases = _search_cases(np.random.default_rng(14))
        best, trials = random_search(cases, budget=1, seed=3, method="exact")
        assert len(trials) == 1 and best.to_dict().items() <= trials[0].items()
        again, trials2 = random_search(cases, budget=3, seed=3, method="exact")
        assert trials2[0] == trials[0]
        assert random_search(cases, budget=3, seed=3, method="exact") == (again, trials2)
        write_trials(trials, tmp_path / "t.csv")
        assert len((tmp_path / "t.csv").read_text().splitlines()) == 2

    def test_zero_point_is_a_floor(self):
        cases = _search_cases(np.random.default_rng(15))
        # unary-argmax Dice, computed without the CRF code
        floor = np.mean([dice(BinaryMask(t.labels == 1), BinaryMask(p.foreground > 0.5)) for p, _, t in cases])
        # a space whose samples are all harmful: huge smoothing swallows the object
        space = {"w_pos": (50.0, 100.0), "w_bil": (50.0, 100.0), "sigma_pos": (5.0, 8.0),
                 "sigma_bil": (5.0, 8.0), "sigma_int": (5.0, 8.0)}
        best, trials = random_search(cases, space, budget=3, seed=0, include_unary=True, method="exact")
        assert len(trials) == 4 and trials[0]["w_pos"] == 0 and trials[0]["w_bil"] == 0
        assert trials[0]["dice"] == pytest.approx(floor, abs=1e-12)
        assert max(t["dice"] for t in trials[1:]) < floor
        assert (best.w_pos, best.w_bil) == (0, 0)

    def test_fixed_ranges(self):
        cases = _search_cases(np.random.default_rng(16))
        space = {"w_pos": (2.0, 2.0), "w_bil": (0.5, 4.0), "sigma_pos": (1.0, 1.0), "sigma_bil": (1.0, 1.0),
                 "sigma_int": (0.1, 0.1)}
        _, trials = random_search(cases, space, budget=5, seed=1, method="exact")
        assert all(t["w_pos"] == 2.0 and 0.5 <= t["w_bil"] <= 4.0 for t in trials)

    def test_empty_cases(self):
        with pytest.raises(ValueError):
            random_search([], budget=1)
