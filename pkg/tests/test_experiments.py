import numpy as np
import pytest

from emodiff.denoiser import DenoiserConfig, DiffusionTrainConfig, save_denoiser
from emodiff.experiments import Synthesizer, rotating_loso, sampling_schedule
from emodiff.protocols import loso_experiment
from emodiff.toydata import ToyCorpusSpec, generate_toy_corpus

MODEL = DenoiserConfig.toy(res_filters=16, n_res_pre=1, n_res_post=1)
TRAIN = DiffusionTrainConfig.toy(train_steps=2, batch=4, sample_steps=4)


@pytest.fixture(scope="module")
def corpus():
    return generate_toy_corpus(ToyCorpusSpec(utterances=3))


def test_sampling_schedule_strides():
    assert sampling_schedule(TRAIN).num_steps == 4
    assert sampling_schedule(DiffusionTrainConfig.toy(sample_steps=200)).num_steps == 200


def test_ratio_and_labels(corpus):
    synth = Synthesizer(MODEL, TRAIN, ratio=0.5, scope="fold")
    train = corpus[:20]
    out = synth(train, "f", 0)
    assert len(out) == 10
    pool = {(s.emotion, s.speaker, s.text) for s in train}
    assert all((s.emotion, s.speaker, s.text) in pool for s in out)
    assert all(s.values.shape == (16, 64) and np.abs(s.values).max() <= 1 for s in out)
    assert len({s.source_id for s in out}) == 10


def test_deterministic_and_cached(corpus):
    synth = Synthesizer(MODEL, TRAIN, ratio=0.25, scope="corpus", corpus=corpus)
    a = synth(corpus[:16], "x", 1)
    b = Synthesizer(MODEL, TRAIN, ratio=0.25, scope="corpus", corpus=corpus)(corpus[:16], "x", 1)
    assert all(np.array_equal(p.values, q.values) for p, q in zip(a, b))
    synth(corpus[16:32], "y", 1)
    assert list(synth._models) == [("corpus", 1)]


def test_oversampling_and_zero(corpus):
    synth = Synthesizer(MODEL, TRAIN, ratio=2.0, scope="fold")
    assert len(synth(corpus[:5], "f", 0)) == 10
    assert Synthesizer(MODEL, TRAIN, ratio=0.0, scope="fold")(corpus[:5], "f", 0) == []


def test_pretrained_generator(corpus, tmp_path):
    from emodiff.denoiser import Denoiser

    save_denoiser(tmp_path, Denoiser(MODEL, seed=9), TRAIN, 0, 9)
    synth = Synthesizer(MODEL, TRAIN, ratio=0.25, generator_path=tmp_path)
    assert len(synth(corpus[:8], "f", 0)) == 2


def test_bad_scope():
    with pytest.raises(ValueError):
        Synthesizer(MODEL, TRAIN, scope="global")
    with pytest.raises(ValueError, match="corpus"):
        Synthesizer(MODEL, TRAIN, scope="corpus")


def test_rotating_loso_folds(corpus):
    from emodiff.classifier import ClassifierConfig

    cfg = ClassifierConfig.toy(epochs=1, conv_filters=(4, 4, 4), hidden=4)
    reports = rotating_loso(corpus, None, cfg, seeds=[0, 1, 5], conditions=("real",), dev_fraction=0.34)
    assert [(r.fold, r.seed) for r in reports[0].runs] == [("toy-spk0", 0), ("toy-spk1", 1), ("toy-spk1", 5)]


def test_parallel_jobs_match_serial(corpus):
    from emodiff.classifier import ClassifierConfig

    cfg = ClassifierConfig.toy(epochs=1, conv_filters=(4, 4, 4), hidden=4)
    serial = loso_experiment(corpus, None, cfg, [0], ("real",), 0.34, n_jobs=1, folds=["toy-spk0", "toy-spk2"])
    parallel = loso_experiment(corpus, None, cfg, [0], ("real",), 0.34, n_jobs=2, folds=["toy-spk0", "toy-spk2"])
    assert [r.confusion for r in serial[0].runs] == [r.confusion for r in parallel[0].runs]
