"""Greedy and beam-search decoding, optionally fused with an n-gram label LM.

Only the encoder and decoder partitions are read; auxiliary and CE heads
exist for training only.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .model import ModelConfig, ParamSet, encode, joint_logits_np


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


class TransducerScorer:
    """Incremental access to the posterior at (frame t, label history)."""

    def __init__(self, x, params: ParamSet, config: ModelConfig):
        self.config = config
        self.decoder = params["decoder"]
        enc_only = {"enc_shared": {k: dc.constant(v) for k, v in params["enc_shared"].items()},
                    "enc_upper": {k: dc.constant(v) for k, v in params["enc_upper"].items()}}
        self.enc = encode(np.asarray(x, dtype=np.float64), enc_only, config).top.value[0]
        self.num_frames = self.enc.shape[0]

    def initial_state(self):
        return self.step(None, 0)

    def step(self, state, label):
        """Feed ``label`` (0 = start) to the prediction network."""
        dec, P = self.decoder, self.config.pred_hidden
        inp = dec["pred.embed"][label]
        new = []
        for k in range(1, self.config.pred_layers + 1):
            h, c = (np.zeros(P), np.zeros(P)) if state is None else state[k - 1]
            h, c = dc.lstm_step(inp @ dec[f"pred{k}.w_ih"] + dec[f"pred{k}.b"], h, c, dec[f"pred{k}.w_hh"])
            new.append((h, c))
            inp = h
        return tuple(new)

    def logprobs(self, t, state):
        return _log_softmax(joint_logits_np(self.enc[t], state[-1][0], self.decoder))


class GridScorer:
    """Scorer over a fixed (T', U+1, V) log grid; the state is the label count."""

    def __init__(self, grid):
        self.grid = np.asarray(grid, dtype=np.float64)
        self.num_frames = self.grid.shape[0]

    def initial_state(self):
        return 0

    def step(self, state, label):
        return state + 1

    def logprobs(self, t, state):
        return self.grid[t, min(state, self.grid.shape[1] - 1)]


def greedy_search(scorer, max_symbols_per_frame: int = 10) -> list[int]:
    if max_symbols_per_frame < 1:
        raise ValueError("max_symbols_per_frame must be >= 1")
    state = scorer.initial_state()
    out = []
    for t in range(scorer.num_frames):
        for _ in range(max_symbols_per_frame):
            k = int(np.argmax(scorer.logprobs(t, state)))
            if k == 0:
                break
            out.append(k)
            state = scorer.step(state, k)
    return out


def greedy_decode(x, params: ParamSet, config: ModelConfig, max_symbols_per_frame: int = 10) -> list[int]:
    return greedy_search(TransducerScorer(x, params, config), max_symbols_per_frame)


# -- language model ----------------------------------------------------------------------------

@dataclass
class NGramLM:
    """Add-one smoothed label LM.  Column ``vocab_size`` is the end marker."""
    order: int
    vocab_size: int
    table: np.ndarray  # unigram: (V+1,); bigram: (V, V+1) with context 0 = sentence start

    @property
    def end(self) -> int:
        return self.vocab_size

    def logprob(self, context: int, label: int) -> float:
        if self.order == 1:
            return float(self.table[label])
        return float(self.table[context, label])

    def conditional(self, context: int = 0) -> np.ndarray:
        row = self.table if self.order == 1 else self.table[context]
        return np.exp(row[1:])


def train_ngram_lm(transcripts, order: int, vocab_size: int) -> NGramLM:
    """Count labels 1..V-1 (plus end transitions for bigrams) with add-one smoothing."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    transcripts = [list(map(int, t)) for t in transcripts]
    if not transcripts:
        raise ValueError("empty LM training corpus")
    V = vocab_size
    n_out = V  # labels 1..V-1 plus end
    if order == 1:
        counts = np.zeros(V + 1)
        for t in transcripts:
            for w in t:
                counts[w] += 1
        probs = (counts[1:] + 1.0) / (counts[1:].sum() + n_out)
        table = np.concatenate([[-np.inf], np.log(probs)])
    else:
        counts = np.zeros((V, V + 1))
        for t in transcripts:
            prev = 0
            for w in t:
                counts[prev, w] += 1
                prev = w
            counts[prev, V] += 1
        probs = (counts[:, 1:] + 1.0) / (counts[:, 1:].sum(axis=1, keepdims=True) + n_out)
        table = np.concatenate([np.full((V, 1), -np.inf), np.log(probs)], axis=1)
    return NGramLM(order, V, table)


# -- beam search ----------------------------------------------------------------------------------

@dataclass
class Hypothesis:
    labels: tuple
    score: float          # transducer log-score, merged over alignments
    lm_score: float = 0.0
    state: object = field(default=None, repr=False, compare=False)

    def fused(self, mu: float) -> float:
        return self.score + mu * self.lm_score


def beam_search_scorer(scorer, beam_width: int, lm: NGramLM | None = None, mu: float = 0.0,
                       max_symbols_per_frame: int = 10) -> list[Hypothesis]:
    """Frame-synchronous beam search.

    Within a frame, blank and label extensions of the live hypotheses compete
    for ``beam_width`` slots; blank-extended hypotheses move to the next
    frame and merge by log-add-exp when their label sequences coincide.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if lm is None:
        mu = 0.0

    def lm_term(labels, k):
        return lm.logprob(labels[-1] if labels else 0, k) if lm is not None else 0.0

    hyps = [Hypothesis((), 0.0, 0.0, scorer.initial_state())]
    for t in range(scorer.num_frames):
        finished: dict[tuple, Hypothesis] = {}
        frontier = hyps
        for rnd in range(max_symbols_per_frame + 1):
            cands = []
            for rank, h in enumerate(frontier):
                lp = scorer.logprobs(t, h.state)
                base = h.fused(mu)
                cands.append((-(base + lp[0]), rank, 0, h, lp[0], 0.0))
                if rnd < max_symbols_per_frame:
                    for k in range(1, lp.shape[0]):
                        lmk = lm_term(h.labels, k)
                        cands.append((-(base + lp[k] + mu * lmk), rank, k, h, lp[k], lmk))
            cands.sort(key=lambda c: c[:3])
            frontier = []
            for _, _, k, h, lpk, lmk in cands[:beam_width]:
                if k == 0:
                    prev = finished.get(h.labels)
                    score = h.score + lpk
                    if prev is None:
                        finished[h.labels] = Hypothesis(h.labels, score, h.lm_score, h.state)
                    else:
                        prev.score = float(np.logaddexp(prev.score, score))
                else:
                    frontier.append(Hypothesis(h.labels + (k,), h.score + lpk, h.lm_score + lmk,
                                               scorer.step(h.state, k)))
            if not frontier:
                break
        hyps = sorted(finished.values(), key=lambda h: (-h.fused(mu), h.labels))[:beam_width]
    if lm is not None:
        for h in hyps:
            h.lm_score += lm.logprob(h.labels[-1] if h.labels else 0, lm.end)
    return sorted(hyps, key=lambda h: (-h.fused(mu), h.labels))


def beam_search(x, params: ParamSet, config: ModelConfig, beam_width: int, lm: NGramLM | None = None,
                mu: float = 0.0, max_symbols_per_frame: int = 10) -> list[Hypothesis]:
    return beam_search_scorer(TransducerScorer(x, params, config), beam_width, lm, mu, max_symbols_per_frame)


# -- dataset-level helpers -------------------------------------------------------------------------

def _decode_one(args):
    x, params, config, beam, lm, mu, max_sym = args
    if beam == 1 and lm is None:
        labels = greedy_decode(x, params, config, max_sym)
        return [{"labels": labels, "score": None}]
    hyps = beam_search(x, params, config, beam, lm, mu, max_sym)
    return [{"labels": list(h.labels), "score": h.fused(mu)} for h in hyps]


def decode_dataset(utterances, params: ParamSet, config: ModelConfig, beam_width: int = 1,
                   lm: NGramLM | None = None, mu: float = 0.0, max_symbols_per_frame: int = 10,
                   jobs: int = 1) -> list[dict]:
    """N-best records ``{"id", "hyps": [{"labels", "score"}]}``; beam 1 without LM is greedy."""
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    work = [(u.features, params, config, beam_width, lm, mu, max_symbols_per_frame) for u in utterances]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_decode_one, work))
    else:
        results = [_decode_one(w) for w in work]
    return [{"id": u.id, "hyps": r} for u, r in zip(utterances, results)]


def write_nbest(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_nbest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
