import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparse_ib import objectives as O
from sparse_ib import tensor as T
from sparse_ib.data import Document, Vocab, make_batch
from sparse_ib.model import ModelConfig, RationaleModel, budget, infer_mask, sample_mask
from sparse_ib.rng import Rng

WORDS = [f"w{i}" for i in range(30)]


def tiny_model(seed=0, **kw):
    vocab = Vocab(WORDS)
    cfg = ModelConfig(vocab_size=len(vocab), embed_dim=6, hidden_dim=5, **kw)
    classes = [] if kw.get("regression") else ["A", "B"]
    return RationaleModel.init(cfg, seed, vocab, classes)


def random_doc(rng, n=None, query=False, label="A"):
    n = n or 1 + rng.integers(8)
    sents = [[WORDS[j] for j in rng.integers(len(WORDS), 1 + rng.integers(5))] for _ in range(n)]
    q = [WORDS[j] for j in rng.integers(len(WORDS), 3)] if query else None
    return Document(f"d{rng.integers(10**6)}", sents, label, query=q)


def batch_of(model, docs):
    return make_batch(docs, model.vocab, model.config.granularity, model.classes or None)


class TestInferMask:
    def test_top_two(self):
        th = np.array([0.1, 0.9, 0.3, 0.9, 0.2])
        np.testing.assert_array_equal(infer_mask(np.log(th / (1 - th)), 0.4), [0, 1, 0, 1, 0])

    def test_index_tie_break(self):
        np.testing.assert_array_equal(infer_mask(np.array([0.0, 2.2, 0.0]), 0.6), [1, 1, 0])

    def test_floor_clamp(self):
        assert budget(0.01, 3) == 1
        assert infer_mask(np.zeros(3), 0.01).sum() == 1

    def test_exact_products(self):
        # 0.7 * 10 is 7.000000000000001 in floating point
        assert budget(0.7, 10) == 7
        assert budget(0.2, 10) == 2
        assert budget(0.21, 10) == 3

    def test_padding_excluded(self):
        logits = np.array([[5.0, 1.0, 9.0, 9.0]])
        valid = np.array([[1.0, 1.0, 0.0, 0.0]])
        np.testing.assert_array_equal(infer_mask(logits, 0.5, valid), [[1, 0, 0, 0]])

    @settings(max_examples=200)
    @given(n=st.integers(1, 30), pi=st.floats(0.01, 0.99), seed=st.integers(0, 2**32))
    def test_exactly_k(self, n, pi, seed):
        logits = np.round(Rng(seed).uniform(n) * 4)  # plenty of ties
        m = infer_mask(logits, pi)
        assert m.sum() == min(n, max(1, int(np.ceil(pi * n - 1e-9))))
        np.testing.assert_array_equal(m, infer_mask(logits, pi))


class TestExplain:
    def test_zero_head_gives_half(self):
        model = tiny_model()
        model.params["exp.head_w"].data[:] = 0.0
        b = batch_of(model, [random_doc(Rng(0))])
        np.testing.assert_array_equal(model.explain(b).data, 0.0)

    def test_clamped(self):
        model = tiny_model()
        model.params["exp.head_b"].data[:] = 100.0
        b = batch_of(model, [random_doc(Rng(0))])
        assert model.explain(b).data.max() == 15.0

    def test_identical_sentences_identical_reps(self):
        model = tiny_model()
        doc = Document("d", [["w1", "w2"], ["w3"], ["w1", "w2"]], "A")
        reps, _ = model.encode(batch_of(model, [doc]))
        np.testing.assert_array_equal(reps.data[0, 0], reps.data[0, 2])
        logits = model.explain(batch_of(model, [doc])).data
        assert logits[0, 0] == logits[0, 2]

    def test_permutation_equivariant(self):
        model = tiny_model()
        doc = random_doc(Rng(3), n=5)
        perm = [3, 0, 4, 1, 2]
        pdoc = Document("p", [doc.sentences[i] for i in perm], "A")
        a = model.explain(batch_of(model, [doc])).data[0]
        b = model.explain(batch_of(model, [pdoc])).data[0]
        np.testing.assert_allclose(b, a[perm], atol=1e-14)

    def test_all_pad_sentence_is_finite(self):
        model = tiny_model()
        b = batch_of(model, [Document("d", [[]], "A")])
        reps, _ = model.encode(b)
        assert np.all(np.isfinite(reps.data))
        # the empty unit is represented by the PAD embedding
        pad = model.params["exp.embed"].data[0]
        feats = np.concatenate([pad, pad, pad])
        h = np.tanh(feats @ model.params["exp.w1"].data + model.params["exp.b1"].data)
        h = np.tanh(h @ model.params["exp.w2"].data + model.params["exp.b2"].data)
        np.testing.assert_allclose(reps.data[0, 0], h, atol=1e-15)

    def test_padding_does_not_change_logits(self):
        model = tiny_model()
        rng = Rng(4)
        short, long = random_doc(rng, n=2), random_doc(rng, n=7)
        alone = model.explain(batch_of(model, [short])).data[0]
        padded = model.explain(batch_of(model, [short, long])).data[0, :2]
        np.testing.assert_allclose(alone, padded, atol=1e-14)

    def test_empty_batch(self):
        model = tiny_model()
        b = batch_of(model, [random_doc(Rng(0))])
        b.docs = []
        with pytest.raises(ValueError):
            model.encode(b)


class TestPredict:
    def test_zero_mask_is_bias_only(self):
        model = tiny_model()
        rng = Rng(1)
        docs = [random_doc(rng, n=4) for _ in range(3)]
        b = batch_of(model, docs)
        out = model.predict(b, np.zeros((3, 4))).data
        np.testing.assert_array_equal(out[0], out[1])
        np.testing.assert_array_equal(out[0], out[2])

    def test_ones_mask_is_full_context(self):
        model = tiny_model()
        b = batch_of(model, [random_doc(Rng(2), n=4)])
        np.testing.assert_array_equal(model.predict(b, b.unit_valid).data,
                                      model.predict(b, np.ones((1, 4))).data)

    def test_regression_shape(self):
        model = tiny_model(regression=True)
        b = batch_of(model, [random_doc(Rng(2), n=3, label=1.5)])
        assert model.predict(b, np.ones((1, 3))).shape == (1,)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32), query=st.booleans())
    def test_masked_out_sentences_do_not_matter(self, seed, query):
        rng = Rng(seed, "faith")
        model = tiny_model(seed % 7, has_query=query)
        doc = random_doc(rng, query=query)
        b = batch_of(model, [doc])
        with T.no_tape():
            mask = infer_mask(model.explain(b).data, 0.3, b.unit_valid)
            before = model.predict(b, mask).data
            sents = [list(s) for s in doc.sentences]
            for j, m in enumerate(mask[0]):
                if m == 0:
                    sents[j] = [WORDS[i] for i in rng.integers(len(WORDS), max(1, len(sents[j])))]
            mutated = Document(doc.id, sents, doc.label, query=doc.query)
            after = model.predict(batch_of(model, [mutated]), mask).data
        np.testing.assert_array_equal(before, after)


class TestSampleMask:
    def test_frozen_noise(self):
        m = sample_mask(np.zeros((1, 3)), 0.7, np.full((1, 3), 0.5))
        np.testing.assert_array_equal(m.data, 0.5)

    def test_same_seed_same_mask(self):
        logits = np.linspace(-2, 2, 8).reshape(2, 4)
        for kind in ("concrete", "hard_concrete", "kuma", "hard_kuma"):
            a = sample_mask(logits, 0.7, Rng(5, "m"), kind).data
            b = sample_mask(logits, 0.7, Rng(5, "m"), kind).data
            np.testing.assert_array_equal(a, b)
            assert np.all((a >= 0) & (a <= 1))

    def test_hard_concrete_drops_units(self):
        m = sample_mask(np.full((200, 10), -1.0), 0.7, Rng(0), "hard_concrete").data
        assert np.any(m == 0.0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            sample_mask(np.zeros((1, 2)), 0.7, Rng(0), "beta")

    def test_valid_zeroes_padding(self):
        m = sample_mask(np.zeros((1, 3)), 0.7, Rng(0), valid=np.array([[1.0, 1.0, 0.0]]))
        assert m.data[0, 2] == 0.0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = tiny_model(3, learnable_pi=True)
        model.save(tmp_path / "m.json", extra={"seed": 3})
        loaded, extra = RationaleModel.load(tmp_path / "m.json")
        assert extra == {"seed": 3}
        assert loaded.config == model.config and loaded.vocab.itos == model.vocab.itos
        for name, p in model.params.items():
            np.testing.assert_array_equal(loaded.params[name].data, p.data)
        assert loaded.prior_pi == 0.5

    def test_stable_bytes(self, tmp_path):
        tiny_model(1).save(tmp_path / "a.json")
        tiny_model(1).save(tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_bad_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            RationaleModel.load(tmp_path / "missing.json")
        (tmp_path / "x.json").write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            RationaleModel.load(tmp_path / "x.json")

    def test_init_ranges(self):
        model = tiny_model(0)
        for name, p in model.params.items():
            if name.endswith(("b1", "b2", "b3", "head_b", "out_b")):
                assert np.all(p.data == 0)
            else:
                assert np.all(np.abs(p.data) <= 0.1)


def _end_to_end(param_name, kind="sib", query=False, distribution="concrete"):
    model = tiny_model(2, has_query=query)
    rng = Rng(8, "e2e")
    docs = [random_doc(rng, n=4, query=query, label=lab) for lab in ("A", "B", "A")]
    b = batch_of(model, docs)
    u = Rng(9).uniform(b.unit_valid.shape)
    cfg = O.ObjectiveConfig(kind=kind, distribution=distribution)
    base = model.params[param_name]

    def f(x):
        model.params[param_name] = x
        logits = model.explain(b)
        mask = sample_mask(logits, cfg.tau, u, cfg.distribution, valid=b.unit_valid)
        pred = model.predict(b, mask)
        if kind == "sib":
            loss = O.loss_sib(pred, b.labels, logits, cfg, b.unit_valid)
        else:
            loss = O.loss_sl0(pred, b.labels, mask, cfg, b.unit_valid, logits=logits)
        return loss.total

    try:
        return T.grad_check(f, base.data.copy())
    finally:
        model.params[param_name] = base


@pytest.mark.parametrize("name", ["exp.embed", "exp.w1", "exp.head_w", "pred.w1", "pred.out_w"])
def test_end_to_end_gradients(name):
    assert _end_to_end(name) < 1e-3


def test_end_to_end_with_query_and_hard_kuma():
    assert _end_to_end("exp.w2", "sl0", query=True, distribution="hard_kuma") < 1e-3
