"""Greedy and beam-search caption generation.

A caption is generated for at most ``max_len`` steps. It ends early when
``<end>`` is emitted; otherwise it is cut off after ``max_len`` tokens.
Scores are raw sums of token log-probabilities with no length normalization.
Ties are broken toward the lexicographically smaller id sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import DecoderParams, DecoderState, _check_width, _rows, attend_batch, init_state_batch, lstm_batch, output_batch


@dataclass(frozen=True)
class DecodeConfig:
    beam_width: int = 4
    max_len: int = 50

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


@dataclass
class Hypothesis:
    ids: tuple[int, ...]
    log_prob: float
    state: DecoderState
    finished: bool = False
    alphas: tuple[np.ndarray, ...] = field(default=(), repr=False)


class _Stepper:
    """Runs one decoder step for a stack of hypotheses over one image."""

    def __init__(self, A, params: DecoderParams):
        A = _rows(A)
        _check_width(A, params)
        self.params = params
        self.A = A[None]
        self.mask = np.ones((1, A.shape[0]), dtype=bool)
        self.proj = self.A @ params["W_aA"].T

    def initial(self) -> DecoderState:
        h0, c0, _ = init_state_batch(self.A, self.mask, self.params)
        return DecoderState(h0[0], c0[0])

    def __call__(self, prev_ids, h, c):
        k = len(prev_ids)
        A = np.broadcast_to(self.A, (k,) + self.A.shape[1:])
        mask = np.broadcast_to(self.mask, (k, self.mask.shape[1]))
        proj = np.broadcast_to(self.proj, (k,) + self.proj.shape[1:])
        alpha, z, _ = attend_batch(A, mask, proj, h, self.params)
        x = self.params["E"][np.asarray(prev_ids)]
        h, c, _ = lstm_batch(x, h, c, z, self.params)
        logp, _ = output_batch(x, h, z, self.params)
        return logp, h, c, alpha


def _special_ids(vocab) -> tuple[int, int]:
    return vocab.start_id, vocab.end_id


def greedy_search(A, params: DecoderParams, vocab, max_len: int = 50) -> Hypothesis:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    start_id, end_id = _special_ids(vocab)
    step = _Stepper(A, params)
    state = step.initial()
    h, c = state.h[None], state.c[None]
    ids, alphas, total = [], [], 0.0
    prev = start_id
    for _ in range(max_len):
        logp, h, c, alpha = step([prev], h, c)
        tok = int(np.argmax(logp[0]))  # first maximum -> smaller id on ties
        total += float(logp[0, tok])
        ids.append(tok)
        alphas.append(alpha[0])
        if tok == end_id:
            break
        prev = tok
    return Hypothesis(tuple(ids), total, DecoderState(h[0], c[0]),
                      finished=ids[-1] == end_id, alphas=tuple(alphas))


def greedy_decode(A, params: DecoderParams, vocab, max_len: int = 50) -> list[int]:
    """Argmax decoding; returns token ids without the trailing ``<end>``."""
    return strip_end(greedy_search(A, params, vocab, max_len).ids, vocab.end_id)


def beam_search_hypothesis(A, params: DecoderParams, vocab, config: DecodeConfig = DecodeConfig()) -> Hypothesis:
    start_id, end_id = _special_ids(vocab)
    step = _Stepper(A, params)
    V = params.dims.V
    live = [Hypothesis((), 0.0, step.initial())]
    done: list[Hypothesis] = []

    for t in range(config.max_len):
        # live is kept in (score desc, ids asc) order, so its index is a tie rank
        live.sort(key=lambda hy: (-hy.log_prob, hy.ids))
        lex_rank = np.empty(len(live), dtype=np.int64)
        lex_rank[sorted(range(len(live)), key=lambda j: live[j].ids)] = np.arange(len(live))

        prev = [hy.ids[-1] if hy.ids else start_id for hy in live]
        h = np.stack([hy.state.h for hy in live])
        c = np.stack([hy.state.c for hy in live])
        logp, h, c, alpha = step(prev, h, c)

        scores = np.array([hy.log_prob for hy in live])[:, None] + logp
        parent = np.repeat(np.arange(len(live)), V)
        token = np.tile(np.arange(V), len(live))
        flat = scores.reshape(-1)
        order = np.lexsort((token, lex_rank[parent], -flat))[:config.beam_width]

        next_live = []
        for k in order:
            j, tok = int(parent[k]), int(token[k])
            hy = Hypothesis(live[j].ids + (tok,), float(flat[k]), DecoderState(h[j], c[j]),
                            finished=tok == end_id, alphas=live[j].alphas + (alpha[j],))
            (done if hy.finished else next_live).append(hy)
        if t == config.max_len - 1:
            done.extend(next_live)  # truncated at max_len
            next_live = []
        live = next_live
        if not live:
            break
        if done and max(hy.log_prob for hy in live) <= max(hy.log_prob for hy in done):
            break

    return min(done, key=lambda hy: (-hy.log_prob, hy.ids))


def beam_search(A, params: DecoderParams, vocab, config: DecodeConfig = DecodeConfig()) -> tuple[list[int], float]:
    """Best caption under beam search as ``(ids without <end>, total log-prob)``."""
    best = beam_search_hypothesis(A, params, vocab, config)
    return strip_end(best.ids, vocab.end_id), best.log_prob


def strip_end(ids, end_id: int) -> list[int]:
    ids = list(ids)
    return ids[:ids.index(end_id)] if end_id in ids else ids
