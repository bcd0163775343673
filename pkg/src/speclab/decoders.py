"""Sequence decoders: greedy, beam, exact multi-token joint greedy (MJGD),
vanilla speculative decoding and multi-token joint speculative decoding (MJSD).

All decoders work on :class:`~speclab.lm.TabularLM` models, so every
probability they touch is exact.  Randomness comes from a
``numpy.random.Generator`` passed in by the caller, drawn in a fixed order.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cost import RunStats
from .errors import BudgetExceeded, ZeroResidual
from .lm import IDENTITY, TabularLM, TokenSeq, WarpSpec, apply_warp, joint_logprob, sample_index
from .rng import make_rng

DECODER_KINDS = ("greedy", "beam", "mjgd", "vanilla_spec", "mjsd", "sbd")
DEFAULT_BUDGET = 10**6


@dataclass(frozen=True)
class DecodeConfig:
    """Knobs shared by every decoder.

    ``block_size`` is MJGD's joint block length; ``min_width``/``max_width``
    bound the random beam width of speculative beam decoding.
    """

    max_new_tokens: int = 16
    gamma: int = 4
    tau: float = 0.1
    num_beams: int = 1
    warp_draft: WarpSpec = IDENTITY
    warp_target: WarpSpec = IDENTITY
    seed: int = 0
    stop_token: int | None = None
    block_size: int = 1
    min_width: int = 1
    max_width: int = 1
    beam_mode: str = "deterministic"
    draft_select: str = "best"
    joint_warped: bool = False
    enumeration_budget: int = DEFAULT_BUDGET
    allow_tau_one: bool = False

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.num_beams < 1:
            raise ValueError("num_beams must be >= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        hi = 1.0 if self.allow_tau_one else math.nextafter(1.0, 0.0)
        if not 0.0 <= self.tau <= hi:
            raise ValueError(f"tau must be in [0, 1), got {self.tau}")
        if not 1 <= self.min_width <= self.max_width:
            raise ValueError("need 1 <= min_width <= max_width")
        if self.beam_mode not in ("deterministic", "stochastic"):
            raise ValueError(f"unknown beam_mode {self.beam_mode!r}")
        if self.draft_select not in ("best", "sample"):
            raise ValueError(f"unknown draft_select {self.draft_select!r}")
        for name in ("warp_draft", "warp_target"):
            w = getattr(self, name)
            if isinstance(w, dict):
                object.__setattr__(self, name, WarpSpec.from_dict(w))
            elif w is None:
                object.__setattr__(self, name, IDENTITY)

    def replace(self, **changes) -> "DecodeConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class StepOutcome:
    """Result of one speculative iteration.

    ``draft_q_logprobs[j-1]`` and ``target_p_logprobs[j-1]`` are the log
    probabilities of the first ``j`` draft tokens under each model, and
    ``accept_flags[j-1]`` the verdict recorded for that prefix.
    """

    draft_tokens: tuple[int, ...]
    accepted_len: int
    resampled_token: int
    draft_q_logprobs: tuple[float, ...]
    target_p_logprobs: tuple[float, ...]
    accept_flags: tuple[bool, ...]
    large_calls: int = 1
    small_calls: int = 0
    large_units: int = 1
    small_units: int = 0

    @property
    def accepted_tokens(self) -> tuple[int, ...]:
        return self.draft_tokens[: self.accepted_len]

    @property
    def emitted(self) -> tuple[int, ...]:
        return self.accepted_tokens + (self.resampled_token,)


@dataclass(frozen=True)
class BeamCandidate:
    tokens: TokenSeq
    score: float


def residual_distribution(p, q) -> np.ndarray:
    """``norm(max(0, p - q))``; raises :class:`ZeroResidual` if it has no mass."""
    r = np.maximum(0.0, np.asarray(p, float) - np.asarray(q, float))
    total = r.sum()
    if not total > 0.0:
        raise ZeroResidual("residual distribution has zero mass (p <= q everywhere)")
    return r / total


def _prefix(prefix) -> tuple[int, ...]:
    return tuple(prefix.tokens if isinstance(prefix, TokenSeq) else prefix)


def _pick_first(tokens: Sequence[int], stop_token: int | None) -> int | None:
    if stop_token is None:
        return None
    for i, t in enumerate(tokens):
        if t == stop_token:
            return i
    return None


# greedy -----------------------------------------------------------------


def greedy_decode(lm: TabularLM, prefix, cfg: DecodeConfig, rng=None,
                  stats: RunStats | None = None) -> TokenSeq:
    """Sample each next token from the warped target distribution.

    With an argmax warp the result is deterministic.
    """
    rng = make_rng(cfg.seed if rng is None else rng)
    prefix = _prefix(prefix)
    out = list(prefix)
    for _ in range(cfg.max_new_tokens):
        d = apply_warp(lm.next_dist(out), cfg.warp_target)
        tok = sample_index(d, rng)
        out.append(tok)
        if stats is not None:
            stats.record(0, 1)
        if tok == cfg.stop_token:
            break
    return TokenSeq(out, len(prefix))


# beam -------------------------------------------------------------------


def beam_decode(lm: TabularLM, prefix, cfg: DecodeConfig, *, n_tokens: int | None = None,
                warp: WarpSpec | None = None, num_beams: int | None = None,
                stochastic: bool | None = None, rng=None,
                stats: RunStats | None = None) -> list[BeamCandidate]:
    """Beam decoding scored by joint warped log-likelihood.

    Deterministic mode keeps the top ``num_beams`` extensions each step (ties
    go to the lexicographically smaller sequence).  Stochastic mode draws
    ``num_beams`` extensions with replacement, proportional to joint
    likelihood over current beams x next token.  The argmax flag of ``warp``
    is ignored: selection by score already plays that role, and a one-hot
    per-token warp would leave a single candidate per beam.
    """
    prefix = _prefix(prefix)
    n = cfg.max_new_tokens if n_tokens is None else n_tokens
    warp = (cfg.warp_target if warp is None else warp).without_argmax()
    width = cfg.num_beams if num_beams is None else num_beams
    if stochastic is None:
        stochastic = cfg.beam_mode == "stochastic"
    if stochastic:
        rng = make_rng(cfg.seed if rng is None else rng)
    beams: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    for _ in range(n):
        cand_tokens, cand_scores = [], []
        for gen, score in beams:
            d = apply_warp(lm.next_dist(prefix + gen), warp)
            for v in np.flatnonzero(d > 0):
                cand_tokens.append(gen + (int(v),))
                cand_scores.append(score + math.log(d[v]))
        if stats is not None:
            stats.small_model_calls += 1
            stats.small_input_units += len(beams)
        if stochastic:
            s = np.asarray(cand_scores)
            w = np.exp(s - s.max())
            picks = [sample_index(w, rng) for _ in range(width)]
            beams = [(cand_tokens[i], cand_scores[i]) for i in picks]
        else:
            order = sorted(range(len(cand_tokens)),
                           key=lambda i: (-cand_scores[i], cand_tokens[i]))
            beams = [(cand_tokens[i], cand_scores[i]) for i in order[:width]]
    beams.sort(key=lambda b: (-b[1], b[0]))
    return [BeamCandidate(TokenSeq(prefix + g, len(prefix)), s) for g, s in beams]


# MJGD -------------------------------------------------------------------


def _check_budget(vocab_size: int, k: int, budget: int) -> None:
    if vocab_size ** k > budget:
        raise BudgetExceeded(
            f"enumerating {vocab_size}^{k} = {vocab_size ** k} blocks exceeds budget {budget}")


def enumerate_blocks(lm: TabularLM, context: Sequence[int], k: int,
                     budget: int = DEFAULT_BUDGET) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """All ``V**k`` continuations in lexicographic order with their joint probabilities.

    Probabilities are products of stored rows, so for ``k == 1`` they are the
    row itself, bit for bit.
    """
    _check_budget(lm.vocab.size, k, budget)
    context = tuple(context)
    V = lm.vocab.size
    blocks: list[tuple[int, ...]] = [()]
    probs = np.ones(1)
    for _ in range(k):
        rows = np.stack([lm.next_dist(context + b) for b in blocks])
        probs = (probs[:, None] * rows).reshape(-1)
        blocks = [b + (v,) for b in blocks for v in range(V)]
    return blocks, probs


def mjgd_decode(p_lm: TabularLM, prefix, K: int, cfg: DecodeConfig, rng=None,
                stats: RunStats | None = None) -> TokenSeq:
    """Multi-token joint greedy decoding by exhaustive block enumeration.

    Each step scores all ``V**K`` blocks by their joint target probability,
    warps that joint distribution with ``cfg.warp_target`` and draws one block
    (argmax warp: the most likely block, lexicographic ties).  The last block
    is shortened so exactly ``max_new_tokens`` tokens are produced.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    _check_budget(p_lm.vocab.size, min(K, cfg.max_new_tokens), cfg.enumeration_budget)
    rng = make_rng(cfg.seed if rng is None else rng)
    prefix = _prefix(prefix)
    out = list(prefix)
    n = cfg.max_new_tokens
    while len(out) - len(prefix) < n:
        k = min(K, n - (len(out) - len(prefix)))
        blocks, probs = enumerate_blocks(p_lm, out, k, cfg.enumeration_budget)
        block = blocks[sample_index(apply_warp(probs, cfg.warp_target), rng)]
        stop = _pick_first(block, cfg.stop_token)
        if stats is not None:
            V = p_lm.vocab.size
            stats.record(k - 1, k if stop is None else stop + 1, large_calls=k,
                         large_units=sum(V ** d for d in range(k)))
        if stop is not None:
            out.extend(block[: stop + 1])
            break
        out.extend(block)
    return TokenSeq(out, len(prefix))


def optimal_suffix_score(p_lm: TabularLM, prefix, block, horizon: int,
                         budget: int = DEFAULT_BUDGET) -> float:
    """Best achievable log-likelihood of ``block`` followed by any ``horizon`` tokens."""
    prefix, block = _prefix(prefix), tuple(block)
    base = joint_logprob(p_lm, prefix, block)
    if horizon == 0 or base == -math.inf:
        return base
    _, probs = enumerate_blocks(p_lm, prefix + block, horizon, budget)
    best = float(probs.max())
    return base + math.log(best) if best > 0 else -math.inf


# speculative steps --------------------------------------------------------


def vanilla_spec_step(q_lm: TabularLM, p_lm: TabularLM, prefix, cfg: DecodeConfig,
                      rng) -> StepOutcome:
    """One draft-then-verify iteration of token-level speculative sampling.

    Draws happen in a fixed order: ``gamma`` draft tokens, then one uniform per
    verified position up to the first rejection, then the correction token.
    """
    prefix = _prefix(prefix)
    gamma = cfg.gamma
    ctx = list(prefix)
    drafts, qdists = [], []
    for _ in range(gamma):
        qd = apply_warp(q_lm.next_dist(ctx), cfg.warp_draft)
        x = sample_index(qd, rng)
        drafts.append(x)
        qdists.append(qd)
        ctx.append(x)
    # one batched target call covers positions 1..gamma+1
    pdists = [apply_warp(p_lm.next_dist(prefix + tuple(drafts[:t])), cfg.warp_target)
              for t in range(gamma + 1)]

    eta, flags = gamma, []
    for t, x in enumerate(drafts):
        ratio = min(1.0, pdists[t][x] / qdists[t][x])
        ok = rng.random() < ratio
        flags.append(ok)
        if not ok:
            eta = t
            break
    if eta < gamma:
        tok = sample_index(residual_distribution(pdists[eta], qdists[eta]), rng)
    else:
        tok = sample_index(pdists[gamma], rng)

    q_logs = np.cumsum([_log(qdists[t][x]) for t, x in enumerate(drafts)])
    p_logs = np.cumsum([_log(pdists[t][x]) for t, x in enumerate(drafts)])
    return StepOutcome(tuple(drafts), eta, tok, tuple(map(float, q_logs)),
                       tuple(map(float, p_logs)), tuple(flags),
                       large_calls=1, small_calls=gamma, large_units=gamma + 1,
                       small_units=gamma)


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def joint_ratio(p_log: float, q_log: float) -> float:
    """``p/q`` from log values; a zero-probability draft counts as an infinite ratio."""
    if p_log == -math.inf:
        return 0.0
    if q_log == -math.inf:
        return math.inf
    return math.exp(p_log - q_log)


def mjsd_step(q_lm: TabularLM, p_lm: TabularLM, prefix, cfg: DecodeConfig,
              rng) -> StepOutcome:
    """One MJSD iteration: beam-drafted tokens verified by joint likelihood.

    Prefix ``j`` passes iff ``min(1, p_j / q_j) > tau`` where ``p_j`` and ``q_j``
    are joint probabilities of the first ``j`` draft tokens; the longest
    passing prefix is kept even if shorter ones fail.  One extra token is then
    drawn from the (warped) target distribution after the kept prefix.
    """
    prefix = _prefix(prefix)
    gamma = cfg.gamma
    counter = RunStats()
    cands = beam_decode(q_lm, prefix, cfg, n_tokens=gamma, warp=cfg.warp_draft, rng=rng,
                        stats=counter)
    if cfg.draft_select == "sample" and len(cands) > 1:
        s = np.array([c.score for c in cands])
        draft = cands[sample_index(np.exp(s - s.max()), rng)]
    else:
        draft = cands[0]
    x = draft.tokens.generated

    pw = cfg.warp_target if cfg.joint_warped else None
    qw = cfg.warp_draft if cfg.joint_warped else None
    rows = [p_lm.next_dist(prefix + x[:i]) for i in range(gamma + 1)]
    p_logs, q_logs, flags = [], [], []
    p_acc = q_acc = 0.0
    eta = 0
    ctx = list(prefix)
    for i, tok in enumerate(x):
        prow = apply_warp(rows[i], pw) if pw is not None else rows[i]
        qrow = q_lm.next_dist(ctx)
        if qw is not None:
            qrow = apply_warp(qrow, qw)
        p_acc += _log(prow[tok])
        q_acc += _log(qrow[tok])
        ctx.append(tok)
        ok = min(1.0, joint_ratio(p_acc, q_acc)) > cfg.tau
        p_logs.append(p_acc)
        q_logs.append(q_acc)
        flags.append(ok)
        if ok:
            eta = i + 1
    tok = sample_index(apply_warp(rows[eta], cfg.warp_target), rng)
    return StepOutcome(tuple(x), eta, tok, tuple(q_logs), tuple(p_logs), tuple(flags),
                       large_calls=1, small_calls=counter.small_model_calls,
                       large_units=gamma + 1, small_units=counter.small_input_units)


# driver -------------------------------------------------------------------


def _speculative_loop(step, q_lm, p_lm, prefix, cfg, rng, stats) -> TokenSeq:
    out = list(prefix)
    n = cfg.max_new_tokens
    while len(out) - len(prefix) < n:
        res = step(q_lm, p_lm, out, cfg, rng)
        emitted = res.emitted
        stop = _pick_first(emitted, cfg.stop_token)
        stats.record(res.accepted_len, len(emitted), large_calls=res.large_calls,
                     small_calls=res.small_calls, large_units=res.large_units,
                     small_units=res.small_units)
        if stop is not None:
            stats.truncate(len(emitted) - stop - 1)
            out.extend(emitted[: stop + 1])
            break
        out.extend(emitted)
    surplus = len(out) - len(prefix) - n
    if surplus > 0:
        stats.truncate(surplus)
        del out[len(out) - surplus:]
    return TokenSeq(out, len(prefix))


def run_decoder(kind: str, q_lm: TabularLM | None, p_lm: TabularLM, prefix,
                cfg: DecodeConfig, rng=None) -> tuple[TokenSeq, RunStats]:
    """Decode ``cfg.max_new_tokens`` tokens with the named algorithm.

    Speculative kinds run whole iterations; tokens past the limit are dropped
    but the iteration is still counted.
    """
    if kind not in DECODER_KINDS:
        raise ValueError(f"unknown decoder kind {kind!r}; expected one of {DECODER_KINDS}")
    rng = make_rng(cfg.seed if rng is None else rng)
    prefix = _prefix(prefix)
    stats = RunStats()
    if kind == "greedy":
        seq = greedy_decode(p_lm, prefix, cfg, rng, stats)
    elif kind == "beam":
        counter = RunStats()
        best = beam_decode(p_lm, prefix, cfg, rng=rng, stats=counter)[0]
        # beam steps ran on the target model: one call per step, one unit per live beam
        stats.large_model_calls = counter.small_model_calls
        stats.large_input_units = counter.small_input_units
        stats.iterations = counter.small_model_calls
        stats.accepted_lengths = [0] * stats.iterations
        gen = best.tokens.generated
        stop = _pick_first(gen, cfg.stop_token)
        if stop is not None:
            gen = gen[: stop + 1]
        stats.tokens_emitted = len(gen)
        seq = TokenSeq(prefix + gen, len(prefix))
    elif kind == "mjgd":
        seq = mjgd_decode(p_lm, prefix, cfg.block_size, cfg, rng, stats)
    elif kind == "vanilla_spec":
        seq = _speculative_loop(vanilla_spec_step, q_lm, p_lm, prefix, cfg, rng, stats)
    elif kind == "mjsd":
        seq = _speculative_loop(mjsd_step, q_lm, p_lm, prefix, cfg, rng, stats)
    else:
        from .sbd import sbd_decode

        seq = sbd_decode(q_lm, p_lm, prefix, cfg, rng, stats)
    return seq, stats
