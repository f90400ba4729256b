import logging

import numpy as np
import pytest

from dtir.degrade import Blur, GaussianNoise, Mask, PairedSet, TaskSpec, make_clean, to_net
from dtir.diffusion import build_schedule
from dtir.errors import ContractError
from dtir.matching import MatchReport, match_timestep, rank_tasks, residual_errors
from dtir.model import ModelSpec, build_model

SMALL = ModelSpec(base_channels=4, depth=2, embed_dim=8, n_experts=2, adapter_dim=2)


@pytest.fixture(scope="module")
def sched():
    return build_schedule()


def _oracle_predictor(sched, x0_net):
    # exact noise predictor when the clean image is known to be x0
    def predict(x, t):
        ab = sched.alpha_bar[int(t[0])]
        return ((x - np.sqrt(ab) * x0_net) / np.sqrt(1 - ab)).astype(np.float32)
    return predict


class TestResidualErrors:
    def test_exact_predictor_gives_zero_everywhere(self, sched):
        # with a perfect denoiser the removed residual equals y - x at every t
        clean = make_clean(0, 3, (1, 8, 8)) * 0.8 + 0.1
        degraded = np.clip(clean + np.random.default_rng(0).normal(0, 0.05, clean.shape), 0, 1)
        errs = residual_errors(_oracle_predictor(sched, to_net(clean)), clean, degraded, sched)
        assert errs.shape == (sched.T,)
        assert np.max(errs[:25]) < 1e-6

    def test_hand_value_zero_predictor(self, sched):
        # eps = 0: x0_hat = clip(y / sqrt(ab)); error = mean ||c(y - x0_hat) - c(y - x)||^2
        rng = np.random.default_rng(1)
        clean = rng.uniform(0, 1, (2, 1, 4, 4))
        degraded = rng.uniform(0, 1, (2, 1, 4, 4))
        zero = lambda x, t: np.zeros_like(x)  # noqa: E731
        errs = residual_errors(zero, clean, degraded, sched)
        x, y = to_net(clean).astype(np.float64), to_net(degraded).astype(np.float64)
        for t in (1, 17, 50):
            x0 = np.clip(y / np.sqrt(sched.alpha_bar[t]), -1, 1)
            c = lambda r: r - r.mean(axis=(1, 2, 3), keepdims=True)  # noqa: E731
            want = np.mean(np.sum((c(y - x0) - c(y - x)) ** 2, axis=(1, 2, 3)))
            assert errs[t - 1] == pytest.approx(want, rel=1e-5)


class TestMatchTimestep:
    def test_deterministic_and_argmin(self, sched, caplog):
        params = build_model(SMALL, 0)
        clean = make_clean(3, 4, (1, 8, 8))
        pairs = PairedSet(clean, np.clip(clean + 0.1, 0, 1))
        with caplog.at_level(logging.WARNING):
            a = match_timestep(params, pairs, sched, seed=0, pretrained=False)
        assert "pre-trained" in caplog.text and "< 16" in caplog.text
        b = match_timestep(params, pairs, sched, seed=5, pretrained=False)
        np.testing.assert_array_equal(a.per_t_error, b.per_t_error)
        assert a.t_mat == int(np.argmin(a.per_t_error)) + 1
        assert not a.pretrained and a.n_images == 4

    def test_identity_pairs(self, sched):
        params = build_model(SMALL, 1)
        clean = make_clean(4, 3, (1, 8, 8))
        rep = match_timestep(params, PairedSet(clean, clean.copy()), sched)
        assert 1 <= rep.t_mat <= sched.T

    def test_empty(self, sched):
        empty = PairedSet(np.zeros((0, 1, 8, 8), np.float32), np.zeros((0, 1, 8, 8), np.float32))
        with pytest.raises(ContractError):
            match_timestep(build_model(SMALL, 0), empty, sched)


class TestReport:
    def test_invariant(self):
        with pytest.raises(ContractError):
            MatchReport(3, np.array([1.0, 0.5, 0.7]), 1)
        # ties go to the smallest t
        assert MatchReport(1, np.array([0.2, 0.2, 0.9]), 1).t_mat == 1

    def test_csv_round_trip(self, tmp_path):
        rep = MatchReport(2, np.array([0.3, 0.1, 0.25]), 16)
        text = rep.to_csv()
        assert text.splitlines()[0] == "t,error"
        assert text.splitlines()[-1] == "t_mat,2"
        assert len(text.splitlines()) == 3 + 2
        rep.save(tmp_path / "m.csv")
        back = MatchReport.load(tmp_path / "m.csv")
        assert back.t_mat == 2
        np.testing.assert_array_equal(back.per_t_error, rep.per_t_error)

    def test_load_rejects_other_files(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ContractError):
            MatchReport.load(tmp_path / "x.csv")


class TestRank:
    def test_sorted(self):
        tasks = [TaskSpec(Blur(3), 47), TaskSpec(GaussianNoise(0.1), 4), TaskSpec(Mask(0.2), 19)]
        assert [t.t_mat for t in rank_tasks(tasks)] == [4, 19, 47]

    def test_stable(self):
        a, b = TaskSpec(Blur(3), 5), TaskSpec(Mask(0.2), 5)
        assert rank_tasks([a, b]) == [a, b] and rank_tasks([b, a]) == [b, a]

    def test_empty_and_missing(self):
        assert rank_tasks([]) == []
        with pytest.raises(ContractError):
            rank_tasks([TaskSpec(Blur(3))])
