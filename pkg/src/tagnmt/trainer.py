"""Adam with warmup, token-bucketed batching, early stopping, and resumable training."""

from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .corpus import ParallelCorpus, strip_tags
from .decoder import DecodeConfig, hypothesis_words, translate
from .metrics import corpus_bleu
from .tokenizer import Vocabulary, join_subwords
from .transformer import Batch, ModelConfig, Transformer, make_batch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.0003
    warmup_steps: int = 16000
    batch_size_tokens: int = 4096
    label_smoothing: float = 0.1
    patience: int = 10
    eval_interval_steps: int = 200
    max_steps: int = 1_000_000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_pad_waste: float = 0.3
    dev_metric: str = "bleu"

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size_tokens < 1 or self.max_steps < 1:
            raise ValueError("learning_rate, batch_size_tokens and max_steps must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.eval_interval_steps < 1 or self.warmup_steps < 0:
            raise ValueError("eval_interval_steps must be >= 1 and warmup_steps >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.dev_metric not in ("bleu", "bleu_smoothed"):
            raise ValueError(f"unknown dev metric {self.dev_metric!r}")


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``learning_rate``, then inverse square-root decay."""
    if step < 1:
        raise ValueError("step counts from 1")
    w = cfg.warmup_steps
    if w == 0:
        return cfg.learning_rate
    if step <= w:
        return cfg.learning_rate * step / w
    return cfg.learning_rate * math.sqrt(w / step)


class AdamState:
    def __init__(self, params: "OrderedDict[str, ad.Tensor]"):
        self.m = OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items())
        self.v = OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items())
        self.t = 0


def adam_step(params, grads, state: AdamState, lr_t: float, cfg: TrainConfig) -> None:
    """In-place Adam update with bias correction.

    ``params`` maps names to arrays, ``grads`` maps names to gradient arrays
    (None means zero).  Non-finite gradients abort before anything changes.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r} at step {state.t + 1}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p -= (lr_t * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# data


def encode_examples(corpus: ParallelCorpus, vocab: Vocabulary) -> list[tuple[list[int], list[int]]]:
    return [(vocab.encode(ex.src_tokens), vocab.encode(ex.tgt_tokens)) for ex in corpus]


def make_batches(
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
    batch_tokens: int,
    max_waste: float = 0.3,
    seed: int = 0,
) -> list[list[int]]:
    """Group example indices into length-bucketed batches.

    A batch holds at most ``batch_tokens`` padded target positions (target plus
    eos) and at most ``max_waste`` of its source+target cells are padding.
    Length ties are broken by a seeded permutation.
    """
    if not pairs:
        return []
    perm = np.random.default_rng(seed).permutation(len(pairs))
    order = sorted(perm.tolist(), key=lambda i: (len(pairs[i][1]), len(pairs[i][0])))
    batches: list[list[int]] = []
    cur: list[int] = []
    real = 0
    max_s = max_t = 0
    for i in order:
        s, t = len(pairs[i][0]), len(pairs[i][1]) + 1
        ns, nt = max(max_s, s), max(max_t, t)
        n = len(cur) + 1
        cells = n * (ns + nt)
        waste = 1.0 - (real + s + t) / cells
        if cur and (n * nt > batch_tokens or waste > max_waste):
            batches.append(cur)
            cur, real, ns, nt = [], 0, s, t
        cur.append(i)
        real += s + t
        max_s, max_t = ns, nt
    if cur:
        batches.append(cur)
    return batches


def pad_waste(pairs, batch: Sequence[int]) -> float:
    s = max(len(pairs[i][0]) for i in batch)
    t = max(len(pairs[i][1]) + 1 for i in batch)
    real = sum(len(pairs[i][0]) + len(pairs[i][1]) + 1 for i in batch)
    return 1.0 - real / (len(batch) * (s + t))


@dataclass
class DevSet:
    srcs: list
    refs: list
    langs: list

    @classmethod
    def from_corpus(cls, corpus: ParallelCorpus, vocab: Vocabulary) -> "DevSet":
        srcs, refs, langs = [], [], []
        for ex in corpus:
            srcs.append(vocab.encode(ex.src_tokens))
            refs.append(join_subwords(strip_tags(ex)[1]))
            langs.append(ex.tgt_lang)
        return cls(srcs, refs, langs)

    def __len__(self) -> int:
        return len(self.srcs)


def dev_bleu(model: Transformer, dev: DevSet, vocab: Vocabulary, tagged: bool, max_len: int, smooth=False):
    cfg = DecodeConfig(mode="greedy", tag_policy="free", max_len=max_len)
    hyps = translate(model, dev.srcs, cfg, vocab, dev.langs, tagged)
    words = [hypothesis_words(h[0], vocab)[1] for h in hyps]
    return corpus_bleu(words, dev.refs, smooth=smooth)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    best: Optional[Checkpoint]
    last: Checkpoint
    log: list = field(default_factory=list)
    stopped_early: bool = False
    steps: int = 0


class Trainer:
    """Owns the model, optimizer, batch schedule and dropout stream for one corpus.

    Epoch ``e`` visits the fixed batches in an order drawn from
    ``default_rng([seed, e])``, so the position ``(epoch, batch_index)`` plus
    the dropout generator state is all a resume needs.
    """

    def __init__(
        self,
        model: Transformer,
        corpus: ParallelCorpus,
        vocab: Vocabulary,
        cfg: TrainConfig,
        dev: Optional[DevSet] = None,
        tagged: bool = True,
        log_path=None,
    ):
        if len(corpus) == 0:
            raise ValueError("cannot train on an empty corpus")
        self.model = model
        self.vocab = vocab
        self.cfg = cfg
        self.dev = dev
        self.tagged = tagged
        self.log_path = Path(log_path) if log_path else None
        self.pairs = encode_examples(corpus, vocab)
        self.batches = make_batches(self.pairs, cfg.batch_size_tokens, cfg.max_pad_waste, cfg.seed)
        self.adam = AdamState(model.params)
        self.step = 0
        self.epoch = 0
        self.batch_index = 0
        self.dev_history: list = []
        self.log: list = []
        self._best: Optional[Checkpoint] = None
        self._best_score = -math.inf
        self._bad_evals = 0
        self._loss_sum = 0.0
        self._loss_n = 0

    # -- state -----------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model_config=self.model.cfg.to_json(),
            params=OrderedDict((k, t.data.copy()) for k, t in self.model.params.items()),
            adam_m=OrderedDict((k, a.copy()) for k, a in self.adam.m.items()),
            adam_v=OrderedDict((k, a.copy()) for k, a in self.adam.v.items()),
            step=self.step,
            rng_state=self.model.rng.bit_generator.state,
            dev_history=list(self.dev_history),
            extra={
                "adam_t": self.adam.t,
                "epoch": self.epoch,
                "batch_index": self.batch_index,
                "train_config": asdict(self.cfg),
                "tagged": self.tagged,
                "vocab": list(self.vocab.itos),
                "bad_evals": self._bad_evals,
                "best_score": None if self._best_score == -math.inf else self._best_score,
            },
        )

    def restore(self, ckpt: Checkpoint, position: bool = True) -> "Trainer":
        """Load parameters, optimizer moments and RNG state from ``ckpt``.

        With ``position=False`` the batch position and early-stopping counters
        are left at their fresh values (used when continuing on a new corpus).
        """
        for k, t in self.model.params.items():
            t.data[...] = ckpt.params[k]
        if ckpt.adam_m:
            for k in self.adam.m:
                self.adam.m[k][...] = ckpt.adam_m[k]
                self.adam.v[k][...] = ckpt.adam_v[k]
        self.adam.t = int(ckpt.extra.get("adam_t", ckpt.step))
        self.step = ckpt.step
        if ckpt.rng_state is not None:
            self.model.rng.bit_generator.state = ckpt.rng_state
        if position:
            self.epoch = int(ckpt.extra.get("epoch", 0))
            self.batch_index = int(ckpt.extra.get("batch_index", 0))
            self.dev_history = list(ckpt.dev_history)
            self._bad_evals = int(ckpt.extra.get("bad_evals", 0))
            best = ckpt.extra.get("best_score")
            self._best_score = -math.inf if best is None else best
        return self

    # -- steps -----------------------------------------------------------

    def _epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.batches))

    def next_batch(self) -> Batch:
        if self.batch_index >= len(self.batches):
            self.epoch += 1
            self.batch_index = 0
        idx = self.batches[self._epoch_order(self.epoch)[self.batch_index]]
        self.batch_index += 1
        return make_batch([self.pairs[i] for i in idx])

    def train_step(self, batch: Batch) -> float:
        model = self.model
        model.train()
        model.zero_grad()
        with ad.Tape() as tape:
            loss = model.forward_loss(batch, self.cfg.label_smoothing)
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"training diverged: loss={value} at step {self.step + 1}")
            tape.backward(loss)
        lr = lr_schedule(self.step + 1, self.cfg)
        arrays = OrderedDict((k, t.data) for k, t in model.params.items())
        grads = {k: t.grad for k, t in model.params.items()}
        adam_step(arrays, grads, self.adam, lr, self.cfg)
        self.step += 1
        model.eval()
        self._loss_sum += value
        self._loss_n += 1
        return value

    def evaluate(self) -> dict:
        record = {"step": self.step, "loss": None, "dev_bleu": None, "lr": lr_schedule(max(self.step, 1), self.cfg)}
        if self._loss_n:
            record["loss"] = self._loss_sum / self._loss_n
        self._loss_sum, self._loss_n = 0.0, 0
        if self.dev is not None and len(self.dev):
            rep = dev_bleu(
                self.model, self.dev, self.vocab, self.tagged, self.model.cfg.max_len,
                smooth=self.cfg.dev_metric == "bleu_smoothed",
            )
            record["dev_bleu"] = rep.bleu
        self.log.append(record)
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        log.info("step %d loss %s dev_bleu %s", self.step, record["loss"], record["dev_bleu"])
        return record

    # -- loops -----------------------------------------------------------

    def run(self, max_steps: Optional[int] = None) -> TrainResult:
        """Train until dev BLEU fails to improve ``patience`` evaluations in a row.

        Returns the best-dev checkpoint along with the final state.
        """
        if self.dev is None or len(self.dev) == 0:
            raise ValueError("early stopping needs a non-empty dev set")
        limit = self.cfg.max_steps if max_steps is None else max_steps
        stopped = False
        while self.step < limit:
            self.train_step(self.next_batch())
            if self.step % self.cfg.eval_interval_steps == 0:
                if self._after_eval(self.evaluate()):
                    stopped = True
                    break
        return TrainResult(self._best, self.checkpoint(), list(self.log), stopped, self.step)

    def _after_eval(self, record: dict) -> bool:
        score = record["dev_bleu"]
        self.dev_history.append(score)
        if score > self._best_score:
            self._best_score = score
            self._bad_evals = 0
            self._best = self.checkpoint()
            return False
        self._bad_evals += 1
        return self._bad_evals >= self.cfg.patience

    def run_epochs(self, n_epochs: int) -> TrainResult:
        """Exactly ``n_epochs`` passes over the batches, no early stopping."""
        if n_epochs < 1:
            raise ValueError("n_epochs must be >= 1")
        for _ in range(n_epochs):
            if self.batch_index >= len(self.batches):
                self.epoch += 1
                self.batch_index = 0
            while self.batch_index < len(self.batches):
                self.train_step(self.next_batch())
            record = self.evaluate()
            record["epoch"] = self.epoch
            if record["dev_bleu"] is not None:
                self.dev_history.append(record["dev_bleu"])
        return TrainResult(None, self.checkpoint(), list(self.log), False, self.step)


def model_from_checkpoint(ckpt: Checkpoint) -> Transformer:
    cfg = ModelConfig(**ckpt.model_config)
    model = Transformer(cfg)
    for k, t in model.params.items():
        t.data[...] = ckpt.params[k]
    if ckpt.rng_state is not None:
        model.rng.bit_generator.state = ckpt.rng_state
    return model


def train(
    model: Transformer,
    corpus: ParallelCorpus,
    dev: DevSet,
    vocab: Vocabulary,
    cfg: TrainConfig,
    tagged: bool = True,
    log_path=None,
) -> TrainResult:
    return Trainer(model, corpus, vocab, cfg, dev, tagged, log_path).run()


def train_epochs(
    model: Transformer,
    corpus: ParallelCorpus,
    vocab: Vocabulary,
    cfg: TrainConfig,
    n_epochs: int,
    dev: Optional[DevSet] = None,
    tagged: bool = True,
    resume: Optional[Checkpoint] = None,
    log_path=None,
) -> TrainResult:
    """Fixed number of epochs; optimizer state continues from ``resume`` if given."""
    trainer = Trainer(model, corpus, vocab, cfg, dev, tagged, log_path)
    if resume is not None:
        trainer.restore(resume, position=False)
    return trainer.run_epochs(n_epochs)
