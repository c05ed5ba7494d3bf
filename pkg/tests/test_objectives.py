import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparse_ib import objectives as O
from sparse_ib import tensor as T
from sparse_ib.gradcheck import LOSS_TOL, loss_cases
from sparse_ib.objectives import ObjectiveConfig, ObjectiveError
from sparse_ib.tensor import Tape, Tensor


def logprobs(rows):
    return T.log_softmax(Tensor(np.array(rows, dtype=float)))


def grad_wrt(f, x):
    leaf = Tensor(np.array(x, dtype=float), requires_grad=True)
    with Tape() as tape:
        tape.backward(f(leaf))
    return leaf.grad


class TestConfig:
    def test_defaults(self):
        cfg = ObjectiveConfig()
        assert (cfg.kind, cfg.pi, cfg.beta, cfg.gamma, cfg.tau) == ("sib", 0.2, 1.0, 1.0, 0.7)
        assert cfg.semi_loss == "full_bce"

    def test_norm_weight_defaults_by_kind(self):
        assert ObjectiveConfig(kind="sl0").norm_weight == O.DEFAULT_LAM["sl0"]
        assert ObjectiveConfig(kind="sl0c").norm_weight == 1.0
        assert ObjectiveConfig(kind="sl0", lam=0.3).norm_weight == 0.3

    @pytest.mark.parametrize("kw", [dict(kind="x"), dict(pi=0.0), dict(pi=1.0), dict(beta=-1.0),
                                    dict(tau=0.0), dict(distribution="beta"), dict(noise="x"),
                                    dict(semi_loss="x"), dict(supervision_fraction=1.5),
                                    dict(kind="sl0", learnable_pi=True), dict(l0=0.1)])
    def test_invalid(self, kw):
        with pytest.raises((ObjectiveError, ValueError)):
            ObjectiveConfig(**kw).validate()

    def test_dict_round_trip(self):
        cfg = ObjectiveConfig(kind="semi", gamma=0.5)
        assert ObjectiveConfig.from_dict(cfg.to_dict()) == cfg


class TestSib:
    def test_info_term_is_kl_sum(self):
        logits = np.array([[math.log(9), 0.0]])
        cfg = ObjectiveConfig(pi=0.2, beta=2.0)
        lb = O.loss_sib(logprobs([[0.0, 0.0]]), [0], logits, cfg)
        kl = (0.9 * math.log(0.9 / 0.2) + 0.1 * math.log(0.1 / 0.8)
              + 0.5 * math.log(0.5 / 0.2) + 0.5 * math.log(0.5 / 0.8))
        assert lb.info_term.item() == pytest.approx(2.0 * kl, abs=1e-12)
        assert lb.task_term.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_padding_excluded(self):
        cfg = ObjectiveConfig()
        a = O.kl_sum(np.array([[1.0, 2.0, 0.0]]), 0.2, np.array([[1, 1, 0]])).item()
        b = O.kl_sum(np.array([[1.0, 2.0]]), 0.2).item()
        assert a == pytest.approx(b, abs=1e-15)
        assert cfg.pi == 0.2

    @settings(max_examples=100, deadline=None)
    @given(theta=st.floats(0.01, 0.99), pi=st.floats(0.01, 0.49))
    def test_gradient_is_log_odds_ratio(self, theta, pi):
        # d KL / d logit = theta (1 - theta) * log(theta (1 - pi) / ((1 - theta) pi))
        logit = math.log(theta / (1 - theta))
        g = grad_wrt(lambda x: T.sum(O.kl_sum(x, pi)), [[logit]])[0, 0]
        expected = theta * (1 - theta) * math.log(theta * (1 - pi) / ((1 - theta) * pi))
        assert g == pytest.approx(expected, abs=1e-10)

    def test_rejects_bad_pi(self):
        with pytest.raises(ObjectiveError):
            O.loss_sib(logprobs([[0.0, 0.0]]), [0], np.zeros((1, 2)), ObjectiveConfig(), pi=1.0)


class TestNorms:
    def test_sl0_mean_mask(self):
        cfg = ObjectiveConfig(kind="sl0", lam=2.0)
        mask = np.array([[0.5, 1.0, 0.0, 0.3]])
        lb = O.loss_sl0(logprobs([[0.0, 0.0]]), [1], mask, cfg, valid=np.array([[1, 1, 1, 0]]))
        assert lb.info_term.item() == pytest.approx(2.0 * 1.5 / 3, abs=1e-15)

    def test_sl0_hard_concrete_uses_expected_l0(self):
        cfg = ObjectiveConfig(kind="sl0", lam=1.0, distribution="hard_concrete")
        logits = np.zeros((1, 2))
        lb = O.loss_sl0(logprobs([[0.0, 0.0]]), [1], np.zeros((1, 2)), cfg, logits=logits)
        assert lb.info_term.item() == pytest.approx(0.842709342138611566, abs=1e-14)
        with pytest.raises(ObjectiveError):
            O.loss_sl0(logprobs([[0.0, 0.0]]), [1], np.zeros((1, 2)), cfg)

    def test_sl0c_penalty(self):
        cfg = ObjectiveConfig(kind="sl0c", pi=0.2, lam=1.0)
        mask = np.array([[0.3] * 10])
        lb = O.loss_sl0c(logprobs([[0.0, 0.0]]), [0], mask, cfg)
        assert lb.info_term.item() == pytest.approx(0.1, abs=1e-15)

    def test_sl0c_zero_gradient_under_budget(self):
        cfg = ObjectiveConfig(kind="sl0c", pi=0.2, lam=1.0)
        g = grad_wrt(lambda m: O.loss_sl0c(logprobs([[0.0, 0.0]]), [0], m, cfg).info_term,
                     [[0.1, 0.2, 0.05, 0.15]])
        np.testing.assert_array_equal(g, 0.0)
        g = grad_wrt(lambda m: O.loss_sl0c(logprobs([[0.0, 0.0]]), [0], m, cfg).info_term,
                     [[0.5, 0.2, 0.05, 0.15]])
        np.testing.assert_allclose(g, 0.25)


class TestSemi:
    def test_positive_only(self):
        cfg = ObjectiveConfig(kind="semi", semi_loss="paper_positive_only")
        logits = np.log(np.array([[0.8 / 0.2, 0.4 / 0.6]]))
        out = O.rationale_supervision(logits, [[1, 0]], cfg).item()
        assert out == pytest.approx(-math.log(0.8), abs=1e-12)
        assert out == pytest.approx(0.22314, abs=1e-5)

    def test_full_bce(self):
        cfg = ObjectiveConfig(kind="semi")
        logits = np.log(np.array([[0.8 / 0.2, 0.4 / 0.6]]))
        out = O.rationale_supervision(logits, [[1, 0]], cfg).item()
        assert out == pytest.approx(-math.log(0.8) - math.log(0.6), abs=1e-12)
        assert out == pytest.approx(0.73397, abs=1e-5)

    def test_bce_minimised_at_target(self):
        cfg = ObjectiveConfig(kind="semi")
        gold = np.array([[1.0, 0.0, 1.0]])
        at = O.rationale_supervision(np.array([[15.0, -15.0, 15.0]]), gold, cfg).item()
        for shift in ([[-1.0, 0, 0]], [[0, 1.0, 0]]):
            assert O.rationale_supervision(np.array([[15.0, -15.0, 15.0]]) + shift, gold, cfg).item() > at

    def test_examples_without_gold_use_task_only(self):
        cfg = ObjectiveConfig(kind="semi", gamma=1.0)
        logits = np.zeros((2, 2))
        lb = O.loss_semi(logprobs([[0.0, 0.0]] * 2), [0, 1], logits, np.ones((2, 2)), cfg,
                         has_gold=np.array([True, False]))
        assert lb.per_example_info[1] == 0.0
        assert lb.per_example_info[0] == pytest.approx(2 * math.log(2), abs=1e-12)


class TestLearnablePi:
    def test_init_and_pi_term_gradient(self):
        free = Tensor(np.array([0.0]))
        assert O.pi_from_free(free).item() == 0.5
        cfg = ObjectiveConfig(learnable_pi=True, entropy_lambda=0.7, beta=0.0)
        for x0 in (0.0, -1.3, 2.0):
            g = grad_wrt(lambda f: O.loss_learnable_pi(logprobs([[0.0, 0.0]]), [0], np.zeros((1, 3)),
                                                       cfg, f).total, [x0])
            p = 1 / (1 + math.exp(-x0))
            assert g[0] == pytest.approx(0.7 * p * (1 - p), abs=1e-14)

    def test_zero_penalty_pushes_pi_up_when_gates_open(self):
        # with every gate above pi, the KL gradient lowers the loss as pi rises
        cfg = ObjectiveConfig(learnable_pi=True, entropy_lambda=0.0)
        g = grad_wrt(lambda f: O.loss_learnable_pi(logprobs([[0.0, 0.0]]), [0], np.full((1, 5), 2.0),
                                                   cfg, f).total, [0.0])
        assert g[0] < 0


class TestAdditivity:
    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32), kind=st.sampled_from(["sib", "sl0", "sl0c", "semi", "none"]))
    def test_total_is_task_plus_info(self, seed, kind):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(4, 6))
        mask = rng.uniform(size=(4, 6))
        pred = logprobs(rng.normal(size=(4, 3)))
        y = rng.integers(0, 3, size=4)
        cfg = ObjectiveConfig(kind=kind)
        if kind == "sib":
            lb = O.loss_sib(pred, y, logits, cfg)
        elif kind == "sl0":
            lb = O.loss_sl0(pred, y, mask, cfg)
        elif kind == "sl0c":
            lb = O.loss_sl0c(pred, y, mask, cfg)
        elif kind == "semi":
            lb = O.loss_semi(pred, y, logits, (mask > 0.5).astype(float), cfg)
        else:
            lb = O.loss_none(pred, y)
        assert abs(lb.total.item() - lb.task_term.item() - lb.info_term.item()) < 1e-10
        assert lb.task_term.item() == pytest.approx(lb.per_example_task.mean(), abs=1e-12)


def test_regression_task_loss():
    out = O.task_loss(Tensor([1.0, 3.0]), np.array([2.0, 3.0]), regression=True)
    np.testing.assert_array_equal(out.data, [1.0, 0.0])


@pytest.mark.parametrize("name,f,x", loss_cases(), ids=[c[0] for c in loss_cases()])
def test_full_loss_gradients(name, f, x):
    assert T.grad_check(f, x) < LOSS_TOL
