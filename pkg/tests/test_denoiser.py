import numpy as np
import pytest

from emodiff import EMOTIONS
from emodiff import diffusion as D
from emodiff.autodiff import Tensor, no_grad, precision
from emodiff.autodiff import functional as F
from emodiff.autodiff.gradcheck import check_gradients
from emodiff.denoiser import (ConditionSpec, Denoiser, DenoiserConfig, DiffusionTrainConfig, load_denoiser,
                              timestep_embedding, tokenize, train_diffusion)
from emodiff.errors import DimensionMismatchError
from emodiff.toydata import ToyCorpusSpec, generate_toy_corpus

SPEC = ConditionSpec.from_text("happy", "spk1", "a happy line")

# Small widths so finite differences stay cheap; depth is the full 8 + 3.
FD_CFG = DenoiserConfig(in_channels=16, res_filters=16, time_dim=8, cond_dim=8, token_dim=8, time_channels=4,
                        cond_channels=4, vocab_size=16, speaker_buckets=4)


def specs(n, emotion="neutral"):
    return [ConditionSpec.from_text(emotion, f"spk{i % 3}", f"utterance {i} of the test") for i in range(n)]


class TestConfig:
    def test_toy_preset(self):
        cfg = DenoiserConfig.toy()
        assert (cfg.in_channels, cfg.res_filters, cfg.n_res_pre, cfg.n_res_post) == (16, 64, 8, 3)
        assert DiffusionTrainConfig.toy().T == 200 and DiffusionTrainConfig.toy().train_steps == 2000

    @pytest.mark.parametrize("bad", [dict(res_filters=8), dict(time_dim=7), dict(kernel=2), dict(n_res_pre=0)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            DenoiserConfig.toy(**bad)


class TestTimestepEmbedding:
    def test_zero_alternates(self):
        np.testing.assert_array_equal(timestep_embedding(0, 8), [0, 1, 0, 1, 0, 1, 0, 1])

    def test_bounded(self):
        emb = timestep_embedding(np.arange(0, 4001), 128)
        assert emb.min() >= -1 and emb.max() <= 1

    def test_distinct_over_probe(self):
        t = np.linspace(1, 4000, 200).astype(int)
        emb = timestep_embedding(t, 128)
        d = np.linalg.norm(emb[:, None] - emb[None], axis=-1)
        assert d[~np.eye(len(t), dtype=bool)].min() > 0

    def test_frequency_range(self):
        # the last pair runs at omega = 1e-4
        e = timestep_embedding(5000, 8)
        np.testing.assert_allclose(e[-2:], [np.sin(0.5), np.cos(0.5)], rtol=1e-12)
        np.testing.assert_allclose(timestep_embedding(1, 8)[:2], [np.sin(1), np.cos(1)])

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            timestep_embedding(3, 7)


class TestConditioning:
    def test_tokenize(self):
        assert tokenize("Don't STOP, now!") == ("don't", "stop", "now")

    def test_unknown_emotion(self):
        with pytest.raises(ValueError, match="unknown emotion"):
            ConditionSpec("bored", "s", ())

    def test_identical_specs_bit_exact(self):
        m = Denoiser(DenoiserConfig.toy(), seed=3)
        a = m.encode([SPEC]).data
        b = m.encode([ConditionSpec.from_text("happy", "spk1", "a happy line")]).data
        np.testing.assert_array_equal(a, b)

    def test_emotion_changes_vector(self):
        for seed in range(10):
            m = Denoiser(DenoiserConfig.toy(), seed=seed)
            out = m.encode([ConditionSpec("angry", "s", ("x",)), ConditionSpec("sad", "s", ("x",))]).data
            assert not np.array_equal(out[0], out[1])

    @pytest.mark.parametrize("n_tokens", [0, 1, 5, 17])
    def test_width(self, n_tokens):
        cfg = DenoiserConfig.toy()
        out = Denoiser(cfg).encode([ConditionSpec("sad", "s", tuple(f"w{i}" for i in range(n_tokens)))])
        assert out.shape == (1, cfg.cond_dim) and np.all(np.isfinite(out.data))

    def test_batch_order_matches_single(self):
        m = Denoiser(DenoiserConfig.toy(), seed=1)
        batch = [ConditionSpec("sad", "a", ("one", "two")), ConditionSpec("happy", "b", ()),
                 ConditionSpec("angry", "c", ("x",)), ConditionSpec("neutral", "a", ("p", "q"))]
        together = m.encode(batch).data
        for i, s in enumerate(batch):
            np.testing.assert_allclose(together[i], m.encode([s]).data[0], rtol=1e-5, atol=1e-6)


class TestForward:
    def test_zero_init_outputs(self):
        m = Denoiser(DenoiserConfig.toy())
        out = m(np.random.default_rng(0).normal(size=(2, 16, 32)), [5, 100], specs(2))
        assert np.all(out.eps_hat.data == 0) and np.all(out.v.data == 0.5)

    @pytest.mark.parametrize("length", [32, 256])
    def test_shapes(self, length):
        m = Denoiser(DenoiserConfig.toy())
        x = np.zeros((3, 16, length))
        out = m(x, 7, specs(3))
        assert out.eps_hat.shape == x.shape and out.v.shape == x.shape
        single = m(np.zeros((16, length)), 7, specs(1))
        assert single.eps_hat.shape == (16, length)

    def test_wrong_channels(self):
        with pytest.raises(DimensionMismatchError, match="16"):
            Denoiser(DenoiserConfig.toy())(np.zeros((1, 80, 32)), 1, specs(1))

    def test_condition_batch_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            Denoiser(DenoiserConfig.toy())(np.zeros((2, 16, 8)), 1, specs(3))

    def test_deterministic(self):
        m = Denoiser(DenoiserConfig.toy(), seed=2)
        for p in m.conv_out.parameters():
            p.assign(np.random.default_rng(0).normal(size=p.shape))
        x = np.random.default_rng(1).normal(size=(2, 16, 16))
        a, b = m(x, [3, 9], specs(2)), m(x, [3, 9], specs(2))
        np.testing.assert_array_equal(a.eps_hat.data, b.eps_hat.data)
        np.testing.assert_array_equal(a.v.data, b.v.data)


@pytest.mark.parametrize("seed", range(20))
def test_full_network_gradients(seed):
    with precision("f64"):
        m = Denoiser(FD_CFG, seed=seed)
        rng = np.random.default_rng(seed)
        # randomize the zero-initialized head so gradients reach every layer, and
        # give the condition encoder O(1) weights: at the default scale its
        # attention is near-uniform and the key gradients sink into FD roundoff
        for p in m.conv_out.parameters():
            p.assign(rng.normal(0, 0.3, size=p.shape))
        for p in m.encoder.parameters():
            p.assign(rng.normal(0, 0.7, size=p.shape))
        x = rng.normal(size=(2, 16, 16))
        t = rng.integers(1, 200, 2)
        r_eps, r_v = rng.normal(size=x.shape), rng.normal(size=x.shape)
        cond = [ConditionSpec("angry", "a", ("hello", "there")), ConditionSpec("sad", "b", ("hi",))]

        def loss():
            out = m(Tensor(x), t, cond)
            return F.add(F.sum(F.mul(out.eps_hat, Tensor(r_eps))), F.sum(F.mul(out.v, Tensor(r_v))))

        errs = check_gradients(loss, m.parameters(), max_elements=6, seed=seed)
    assert len(errs) == len(m.parameters())
    worst = max(errs, key=errs.get)
    assert errs[worst] < 1e-4, (worst, errs[worst])


class TestTraining:
    def _data(self, n=8):
        corpus = generate_toy_corpus(ToyCorpusSpec(utterances=2))[:n]
        return [s.values for s in corpus], [ConditionSpec.from_text(s.emotion, s.speaker, s.text) for s in corpus]

    def test_zero_steps_checkpoint_equals_init(self, tmp_path):
        data, conds = self._data()
        model, log = train_diffusion(data, conds, DenoiserConfig.toy(), DiffusionTrainConfig.toy(train_steps=0),
                                     seed=4, out_dir=tmp_path)
        loaded, meta = load_denoiser(tmp_path / "checkpoint")
        init = Denoiser(DenoiserConfig.toy(), seed=4).state_dict()
        for k, v in loaded.state_dict().items():
            np.testing.assert_array_equal(v, init[k])
        assert meta["step"] == 0 and log.rows == []

    def test_initial_loss(self):
        """With eps_hat = 0, L_simple = mean(eps^2) ~ 1 and the VLB term is the v = 0.5 model's."""
        data, conds = self._data()
        m = Denoiser(DenoiserConfig.toy())
        s = D.make_cosine_schedule(200)
        rng = np.random.default_rng(0)
        x0 = np.stack(data)
        simple = []
        for _ in range(20):
            t = rng.integers(1, 201, len(x0))
            eps = rng.standard_normal(x0.shape)
            xt = D.q_sample(x0, t, eps, s)
            with no_grad():
                out = m(xt, t, conds)
                terms = D.hybrid_loss_terms(out.eps_hat, out.v, eps, x0, xt, t, s)
                half = D.p_mean_variance(np.zeros_like(xt), np.full_like(xt, 0.5), xt, t, s)
                vlb_ref = D.vlb_term(half, x0, xt, t, s)
            np.testing.assert_allclose(float(terms.total.data),
                                       float(terms.simple.data) + D.HYBRID_WEIGHT * float(vlb_ref.data), rtol=1e-5)
            simple.append(float(terms.simple.data))
        n = 20 * x0.size
        assert abs(np.mean(simple) - 1.0) < 4 * np.sqrt(2.0 / n)

    def test_loss_curve_and_determinism(self, tmp_path):
        data, conds = self._data()
        cfg = DiffusionTrainConfig.toy(train_steps=6, batch=4, log_every=2, checkpoint_every=4)
        _, log_a = train_diffusion(data, conds, DenoiserConfig.toy(), cfg, seed=1, out_dir=tmp_path / "a")
        _, log_b = train_diffusion(data, conds, DenoiserConfig.toy(), cfg, seed=1, out_dir=tmp_path / "b")
        assert [r[0] for r in log_a.rows] == [2, 4, 6]
        text = (tmp_path / "a" / "loss.csv").read_text()
        assert text.splitlines()[0] == "step,l_simple,l_vlb,l_total"
        assert text == (tmp_path / "b" / "loss.csv").read_text()
        for f in (tmp_path / "a" / "checkpoint").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / "checkpoint" / f.name).read_bytes()

    def test_mismatched_inputs(self):
        data, conds = self._data()
        with pytest.raises(ValueError):
            train_diffusion(data, conds[:-1], DenoiserConfig.toy(), DiffusionTrainConfig.toy(train_steps=1))
        with pytest.raises(DimensionMismatchError):
            train_diffusion([np.zeros((80, 64))], conds[:1], DenoiserConfig.toy(), DiffusionTrainConfig.toy())


@pytest.fixture(scope="module")
def trained_toy():
    corpus = generate_toy_corpus(ToyCorpusSpec())
    conds = [ConditionSpec.from_text(s.emotion, s.speaker, s.text) for s in corpus]
    model, log = train_diffusion([s.values for s in corpus], conds, DenoiserConfig.toy(), DiffusionTrainConfig.toy(),
                                 seed=0)
    return corpus, conds, model, log


def test_toy_run_regression_bound(trained_toy):
    *_, log = trained_toy
    tail = [r[1] for r in log.rows if r[0] > 1900]
    assert len(tail) == 10
    assert np.mean(tail) < 0.7


def test_conditioning_matters(trained_toy):
    """Paired L_simple with correct vs emotion-permuted conditions over 512 evaluations."""
    corpus, conds, model, _ = trained_toy
    s = D.make_cosine_schedule(200)
    rng = np.random.default_rng(11)
    shift = {e: EMOTIONS[(i + 1) % 4] for i, e in enumerate(EMOTIONS)}
    right, wrong = [], []
    for _ in range(8):
        idx = rng.integers(0, len(corpus), 64)
        x0 = np.stack([corpus[i].values for i in idx])
        t = rng.integers(1, 201, 64)
        eps = rng.standard_normal(x0.shape).astype(x0.dtype)
        xt = D.q_sample(x0, t, eps, s)
        good = [conds[i] for i in idx]
        bad = [ConditionSpec(shift[c.emotion], c.speaker, c.tokens) for c in good]
        with no_grad():
            for cond, acc in ((good, right), (bad, wrong)):
                e = model(xt, t, cond).eps_hat.data
                acc.extend(np.mean((e - eps) ** 2, axis=(1, 2)))
    assert len(right) >= 500
    assert np.mean(right) < np.mean(wrong)
