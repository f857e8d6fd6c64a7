import numpy as np
import pytest

from driftscope.trainer.task import MarkovCorpus, TaskConfig, generate_batch, stream


@pytest.fixture(scope="module")
def corpus():
    return MarkovCorpus(TaskConfig())


def test_probe_probability_extremes(corpus):
    for p, expect in ((0.0, False), (1.0, True)):
        task = TaskConfig(p_probe=p)
        b = generate_batch(task, corpus, np.random.default_rng(0), 64, 64, "train")
        assert np.all(b.is_probe == expect)


def test_probe_structure(corpus):
    task = TaskConfig()
    for mode, (lo, hi) in (("eval-id", task.train_gap), ("eval-ood", task.ood_gap)):
        b = generate_batch(task, corpus, np.random.default_rng(1), 200, 64, mode)
        assert b.is_probe.all()
        assert b.gaps.min() >= lo and b.gaps.max() <= hi
        rows = np.arange(b.size)
        q = b.probe_pos
        assert np.all(b.inputs[rows, q - 1] == task.query_token)
        code = b.inputs[rows, q]
        assert np.all((code >= task.codewords[0]) & (code < task.codewords[1]))
        val = b.targets[rows, q]
        assert np.all((val >= task.values[0]) & (val < task.values[1]))
        key = q - 1 - b.gaps - 3
        assert np.all(b.inputs[rows, key] == task.key_token)
        assert np.all(b.inputs[rows, key + 1] == code)
        assert np.all(b.inputs[rows, key + 2] == val)
        assert b.probe_mask().sum() == b.size


def test_batches_deterministic(corpus):
    task = TaskConfig()
    a = generate_batch(task, corpus, stream(5, "train-data"), 16, 64)
    b = generate_batch(task, corpus, stream(5, "train-data"), 16, 64)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.probe_pos, b.probe_pos)
    c = generate_batch(task, corpus, stream(5, "eval"), 16, 64)
    assert not np.array_equal(a.inputs, c.inputs)


def test_gap_must_fit(corpus):
    with pytest.raises(ValueError):
        generate_batch(TaskConfig(), corpus, np.random.default_rng(0), 2, 32)
    with pytest.raises(ValueError):
        generate_batch(TaskConfig(), corpus, np.random.default_rng(0), 2, 64, "bogus")


def test_config_validation():
    with pytest.raises(ValueError):
        TaskConfig(p_probe=1.5)
    with pytest.raises(ValueError):
        TaskConfig(train_gap=(2, 40), ood_gap=(32, 56))
    assert TaskConfig().chance == pytest.approx(1 / 30)


def test_loss_weights(corpus):
    task = TaskConfig(p_probe=0.5)
    b = generate_batch(task, corpus, np.random.default_rng(3), 10, 64)
    w, lm, pr = b.loss_weights(2.0)
    assert lm.sum() == pytest.approx(1.0) and pr.sum() == pytest.approx(1.0)
    assert not lm[b.is_probe].any()
    assert np.array_equal(pr != 0, b.probe_mask())
    np.testing.assert_allclose(w, lm + 2.0 * pr)


def test_corpus_entropy_below_uniform(corpus):
    assert 0 < corpus.entropy_rate() < np.log(8)
