import math
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tagnmt.checkpoint import Checkpoint
from tagnmt.corpus import ParallelCorpus, tag_pair
from tagnmt.trainer import (
    AdamState,
    DevSet,
    TrainConfig,
    Trainer,
    adam_step,
    dev_bleu,
    lr_schedule,
    make_batches,
    model_from_checkpoint,
    pad_waste,
    train_epochs,
)
from tagnmt.tokenizer import RESERVED, Vocabulary
from tagnmt.transformer import ModelConfig, Transformer

WORDS = [f"w{i}</w>" for i in range(8)]


def copy_corpus(n, seed=0, lo=2, hi=6):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        x = [WORDS[i] for i in rng.integers(0, len(WORDS), size=rng.integers(lo, hi + 1))]
        out.append(tag_pair(x, x, "c", "tagged", "a"))
    return ParallelCorpus(tuple(out))


def copy_vocab():
    return Vocabulary([*RESERVED, "<2c>", "<c>", *WORDS])


def tiny_model(vocab, seed=0, d_model=16, **kw):
    kw.setdefault("dropout", 0.0)
    cfg = ModelConfig(vocab_size=len(vocab), n_layers=1, d_model=d_model, n_heads=2, d_ff=2 * d_model, max_len=16,
                      n_control_tokens=vocab.n_control, **kw)
    return Transformer(cfg, seed=seed)


class TestSchedule:
    def test_warmup_peak_and_decay(self):
        cfg = TrainConfig(learning_rate=0.0003, warmup_steps=16000)
        assert lr_schedule(16000, cfg) == pytest.approx(0.0003)
        assert lr_schedule(8000, cfg) == pytest.approx(0.00015)
        assert lr_schedule(64000, cfg) == pytest.approx(0.00015)

    def test_no_warmup(self):
        assert lr_schedule(1, TrainConfig(learning_rate=0.1, warmup_steps=0)) == 0.1

    def test_step_zero_rejected(self):
        with pytest.raises(ValueError):
            lr_schedule(0, TrainConfig())

    @settings(max_examples=50)
    @given(st.integers(1, 100_000), st.integers(1, 20_000))
    def test_peak_is_maximum(self, step, warmup):
        cfg = TrainConfig(learning_rate=1.0, warmup_steps=warmup)
        assert 0.0 < lr_schedule(step, cfg) <= 1.0

    @pytest.mark.parametrize("kw", [dict(patience=0), dict(label_smoothing=1.0), dict(dev_metric="chrf"),
                                    dict(batch_size_tokens=0)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestAdam:
    def _params(self):
        from tagnmt.autodiff import Tensor

        return OrderedDict(w=Tensor(np.array([1.0, -2.0, 0.5])))

    def test_zero_gradient_leaves_params(self):
        params = self._params()
        state = AdamState(params)
        arrays = OrderedDict((k, t.data) for k, t in params.items())
        for _ in range(5):
            adam_step(arrays, {"w": np.zeros(3)}, state, 0.1, TrainConfig())
        np.testing.assert_array_equal(arrays["w"], [1.0, -2.0, 0.5])
        adam_step(arrays, {"w": None}, state, 0.1, TrainConfig())
        np.testing.assert_array_equal(arrays["w"], [1.0, -2.0, 0.5])

    def test_constant_gradient_moves_by_lr_per_step(self):
        # with a constant gradient both bias-corrected moments are exact, so
        # every step moves each weight by lr * g / (|g| + eps)
        params = self._params()
        state = AdamState(params)
        arrays = OrderedDict((k, t.data) for k, t in params.items())
        g = np.array([0.3, -4.0, 1e-3])
        cfg = TrainConfig()
        for _ in range(10):
            adam_step(arrays, {"w": g}, state, 0.01, cfg)
        expected = np.array([1.0, -2.0, 0.5]) - 10 * 0.01 * g / (np.abs(g) + cfg.adam_eps)
        np.testing.assert_allclose(arrays["w"], expected, rtol=1e-9)
        assert state.t == 10

    def test_non_finite_gradient_changes_nothing(self):
        params = self._params()
        state = AdamState(params)
        arrays = OrderedDict((k, t.data) for k, t in params.items())
        with pytest.raises(FloatingPointError, match="'w'"):
            adam_step(arrays, {"w": np.array([0.0, np.nan, 1.0])}, state, 0.1, TrainConfig())
        assert state.t == 0
        np.testing.assert_array_equal(arrays["w"], [1.0, -2.0, 0.5])


lengths = st.lists(st.tuples(st.integers(1, 20), st.integers(0, 20)), min_size=1, max_size=60)


class TestBatching:
    @settings(max_examples=60, deadline=None)
    @given(lengths, st.integers(8, 200), st.floats(0.05, 0.9))
    def test_partition_and_limits(self, lens, budget, waste):
        pairs = [([5] * s, [6] * t) for s, t in lens]
        batches = make_batches(pairs, budget, waste, seed=1)
        assert sorted(i for b in batches for i in b) == list(range(len(pairs)))
        for b in batches:
            if len(b) > 1:
                assert len(b) * max(len(pairs[i][1]) + 1 for i in b) <= budget
                assert pad_waste(pairs, b) <= waste + 1e-12

    def test_uniform_lengths_give_ceil_batches(self):
        pairs = [([5, 5], [6, 6, 6])] * 23
        assert len(make_batches(pairs, batch_tokens=20)) == math.ceil(23 / 5)

    def test_empty(self):
        assert make_batches([], 100) == []

    def test_deterministic(self):
        pairs = [([5] * (i % 4 + 1), [6] * (i % 3)) for i in range(40)]
        assert make_batches(pairs, 30, seed=2) == make_batches(pairs, 30, seed=2)


class TestTrainer:
    def _trainer(self, cfg, n=40, seed=0):
        vocab = copy_vocab()
        corpus = copy_corpus(n, seed)
        dev = DevSet.from_corpus(copy_corpus(8, seed + 100), vocab)
        return Trainer(tiny_model(vocab, seed), corpus, vocab, cfg, dev)

    def test_update_count_over_epochs(self):
        cfg = TrainConfig(batch_size_tokens=40, warmup_steps=10, learning_rate=1e-3)
        t = self._trainer(cfg)
        res = t.run_epochs(3)
        assert res.steps == 3 * len(t.batches)
        assert len(res.log) == 3

    def test_patience_one_with_frozen_weights_stops_after_two_evals(self):
        cfg = TrainConfig(learning_rate=0.0, patience=1, eval_interval_steps=3, batch_size_tokens=40)
        res = self._trainer(cfg).run()
        assert res.stopped_early
        assert len(res.log) == 2 and res.steps == 6
        assert res.best.step == 3

    def test_bit_exact_resume(self):
        cfg = TrainConfig(batch_size_tokens=30, warmup_steps=5, learning_rate=2e-3, eval_interval_steps=1000)
        full = self._trainer(cfg)
        for _ in range(17):
            full.train_step(full.next_batch())

        part = self._trainer(cfg)
        for _ in range(9):
            part.train_step(part.next_batch())
        saved = Checkpoint.from_bytes(part.checkpoint().to_bytes())
        fresh = self._trainer(cfg, seed=0)
        fresh.model = model_from_checkpoint(saved)
        fresh.adam = AdamState(fresh.model.params)
        fresh.restore(saved)
        for _ in range(8):
            fresh.train_step(fresh.next_batch())
        for k in full.model.params:
            np.testing.assert_array_equal(fresh.model.params[k].data, full.model.params[k].data)
        np.testing.assert_array_equal(fresh.adam.v["embed"], full.adam.v["embed"])

    def test_resume_with_dropout_is_bit_exact(self):
        vocab = copy_vocab()
        corpus = copy_corpus(30)
        cfg = TrainConfig(batch_size_tokens=30, warmup_steps=5, learning_rate=2e-3)

        def model():
            return tiny_model(vocab, 1, dropout=0.3, embedding_dropout=0.2)

        a = Trainer(model(), corpus, vocab, cfg)
        for _ in range(10):
            a.train_step(a.next_batch())
        b = Trainer(model(), corpus, vocab, cfg)
        for _ in range(4):
            b.train_step(b.next_batch())
        ck = Checkpoint.from_bytes(b.checkpoint().to_bytes())
        c = Trainer(model_from_checkpoint(ck), corpus, vocab, cfg).restore(ck)
        for _ in range(6):
            c.train_step(c.next_batch())
        for k in a.model.params:
            np.testing.assert_array_equal(c.model.params[k].data, a.model.params[k].data)

    def test_checkpoint_bytes_round_trip(self, tmp_path):
        cfg = TrainConfig(batch_size_tokens=30)
        t = self._trainer(cfg)
        t.train_step(t.next_batch())
        ck = t.checkpoint()
        ck.save(tmp_path / "m.bin")
        again = Checkpoint.load(tmp_path / "m.bin")
        assert again.to_bytes() == ck.to_bytes()
        assert (tmp_path / "m.bin").read_bytes()[:5] == b"TNMT1"
        with pytest.raises(ValueError, match="magic"):
            Checkpoint.from_bytes(b"XXXXX" + ck.to_bytes()[5:])
        with pytest.raises(ValueError):
            Checkpoint.from_bytes(ck.to_bytes()[:-4])

    def test_empty_corpus(self):
        vocab = copy_vocab()
        with pytest.raises(ValueError):
            Trainer(tiny_model(vocab), ParallelCorpus(()), vocab, TrainConfig())

    def test_run_needs_dev(self):
        vocab = copy_vocab()
        with pytest.raises(ValueError, match="dev"):
            Trainer(tiny_model(vocab), copy_corpus(4), vocab, TrainConfig()).run()

    def test_log_file(self, tmp_path):
        vocab = copy_vocab()
        t = Trainer(tiny_model(vocab), copy_corpus(10), vocab, TrainConfig(batch_size_tokens=30),
                    DevSet.from_corpus(copy_corpus(3), vocab), log_path=tmp_path / "log.jsonl")
        t.run_epochs(2)
        assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 2

    def test_continue_on_new_corpus_keeps_optimizer(self):
        vocab = copy_vocab()
        cfg = TrainConfig(batch_size_tokens=30, warmup_steps=4)
        first = train_epochs(tiny_model(vocab), copy_corpus(20), vocab, cfg, 1)
        second = train_epochs(model_from_checkpoint(first.last), copy_corpus(20, seed=5), vocab, cfg, 1,
                              resume=first.last)
        assert second.steps > first.steps
        assert second.last.extra["adam_t"] == second.steps


class TestCopyTask:
    def test_learns_to_copy(self):
        vocab = copy_vocab()
        corpus = copy_corpus(400, seed=3)
        dev = DevSet.from_corpus(copy_corpus(50, seed=4), vocab)
        cfg = TrainConfig(learning_rate=3e-3, warmup_steps=100, batch_size_tokens=200, label_smoothing=0.0,
                          eval_interval_steps=200, patience=3, max_steps=2000, dev_metric="bleu")
        model = tiny_model(vocab, seed=3, d_model=32)
        trainer = Trainer(model, corpus, vocab, cfg, dev)
        res = trainer.run()
        best = model_from_checkpoint(res.best).eval()
        # token accuracy under greedy decoding
        from tagnmt.decoder import DecodeConfig, translate

        hyps = translate(best, dev.srcs, DecodeConfig(mode="greedy", max_len=16), vocab, "c")
        right = total = 0
        for src, (h,) in zip(dev.srcs, hyps):
            want = src[1:]
            got = list(h.content[1:])
            total += len(want)
            right += sum(a == b for a, b in zip(want, got))
        assert right / total >= 0.99
        assert dev_bleu(best, dev, vocab, True, 16).bleu >= 99.0
