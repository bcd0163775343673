"""Brute-force reference computations used to check the decoders.

Everything here enumerates outcomes exhaustively instead of sampling, and
shares no code with the decoders beyond table lookup and warping.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from typing import Sequence

import numpy as np

from .errors import BudgetExceeded
from .lm import TabularLM, WarpSpec, apply_warp

DEFAULT_BUDGET = 10**6


def target_sequence_law(p_lm: TabularLM, prefix: Sequence[int], length: int,
                        warp: WarpSpec | None = None) -> dict[tuple[int, ...], float]:
    """Law of the next ``length`` tokens under per-step warped ancestral sampling."""
    law = {(): 1.0}
    for _ in range(length):
        nxt = {}
        for seq, w in law.items():
            row = apply_warp(p_lm.next_dist(tuple(prefix) + seq), warp)
            for v in range(row.size):
                if row[v] > 0:
                    nxt[seq + (v,)] = w * float(row[v])
        law = nxt
    return law


def vanilla_emission_law(q_lm: TabularLM, p_lm: TabularLM, prefix: Sequence[int],
                         gamma: int, length: int, warp_draft: WarpSpec | None = None,
                         warp_target: WarpSpec | None = None,
                         budget: int = DEFAULT_BUDGET) -> dict[tuple[int, ...], float]:
    """Exact law of the first ``length`` tokens emitted by token-level speculative sampling.

    Integrates the acceptance uniforms analytically: a draft token ``x`` drawn
    from ``q`` survives with probability ``min(1, p(x)/q(x))``; the first
    rejection emits a token from ``norm(max(0, p - q))``; a fully accepted
    draft emits a bonus token from ``p``.  Every draft and every branch is
    enumerated, iteration after iteration, until ``length`` tokens exist.
    """
    V = p_lm.vocab.size
    if V ** gamma * (gamma + 1) * V > budget:
        raise BudgetExceeded(f"enumeration of {V}^{gamma} drafts per iteration exceeds budget")
    prefix = tuple(prefix)

    def warped(lm, seq, warp):
        return apply_warp(lm.next_dist(prefix + seq), warp)

    def iteration(seq: tuple[int, ...]) -> dict[tuple[int, ...], float]:
        """Law of the tokens emitted by one iteration started after ``seq``."""
        out = defaultdict(float)
        for draft in itertools.product(range(V), repeat=gamma):
            w_draft = 1.0
            qs, ps = [], []
            for t in range(gamma):
                qrow = warped(q_lm, seq + draft[:t], warp_draft)
                w_draft *= qrow[draft[t]]
                if w_draft == 0.0:
                    break
                qs.append(qrow)
                ps.append(warped(p_lm, seq + draft[:t], warp_target))
            if w_draft == 0.0:
                continue
            survive = w_draft
            for t in range(gamma):
                x = draft[t]
                a = min(1.0, ps[t][x] / qs[t][x])
                reject = survive * (1.0 - a)
                if reject > 0.0:
                    r = np.maximum(0.0, ps[t] - qs[t])
                    r = r / r.sum()
                    for y in range(V):
                        if r[y] > 0:
                            out[draft[:t] + (y,)] += reject * r[y]
                survive *= a
                if survive == 0.0:
                    break
            if survive > 0.0:
                bonus = warped(p_lm, seq + draft, warp_target)
                for y in range(V):
                    if bonus[y] > 0:
                        out[draft + (y,)] += survive * bonus[y]
        return out

    law = defaultdict(float)
    pending = {(): 1.0}
    while pending:
        nxt = defaultdict(float)
        for seq, w in pending.items():
            for emitted, pr in iteration(seq).items():
                full = seq + emitted
                if len(full) >= length:
                    law[full[:length]] += w * pr
                else:
                    nxt[full] += w * pr
        pending = nxt
    return dict(law)


def law_tv(a: dict, b: dict) -> float:
    keys = set(a) | set(b)
    return 0.5 * math.fsum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys)


def marginal(law: dict[tuple[int, ...], float], position: int) -> dict[int, float]:
    out = defaultdict(float)
    for seq, w in law.items():
        out[seq[position]] += w
    return dict(out)


def beam_sequence_law(p_lm: TabularLM, inputs: Sequence[Sequence[int]],
                      scores: Sequence[float] | None = None,
                      warp: WarpSpec | None = None) -> dict[tuple[int, ...], float]:
    """Target layer law over extended sequences: ``score(s) * p(v | s)``, normalized.

    Duplicate inputs pool their mass on the same extended sequence.
    """
    if scores is None:
        scores = [1.0] * len(inputs)
    weights = defaultdict(float)
    for s, b in zip(inputs, scores):
        row = apply_warp(p_lm.next_dist(tuple(s)), warp)
        for v in range(row.size):
            weights[tuple(s) + (v,)] += b * float(row[v])
    total = math.fsum(weights.values())
    return {k: w / total for k, w in weights.items() if w > 0}


def all_continuations(p_lm: TabularLM, prefix: Sequence[int], n: int,
                      budget: int = DEFAULT_BUDGET):
    """Every length-``n`` continuation with its raw joint log-probability."""
    V = p_lm.vocab.size
    if V ** n > budget:
        raise BudgetExceeded(f"{V}^{n} continuations exceed budget {budget}")
    prefix = tuple(prefix)
    for cont in itertools.product(range(V), repeat=n):
        lp = 0.0
        for t, tok in enumerate(cont):
            pr = p_lm.next_dist(prefix + cont[:t])[tok]
            if pr <= 0:
                lp = -math.inf
                break
            lp += math.log(pr)
        yield cont, lp


def best_continuation(p_lm: TabularLM, prefix: Sequence[int], n: int,
                      budget: int = DEFAULT_BUDGET) -> tuple[tuple[int, ...], float]:
    """Most likely length-``n`` continuation; ties go to the smaller sequence."""
    best, best_lp = None, -math.inf
    for cont, lp in all_continuations(p_lm, prefix, n, budget):
        if best is None or lp > best_lp:
            best, best_lp = cont, lp
    return best, best_lp


def _residual_law(p: dict, q: dict) -> dict | None:
    r = {k: pk - q.get(k, 0.0) for k, pk in p.items() if pk - q.get(k, 0.0) > 0.0}
    total = math.fsum(r.values())
    if total <= 1e-15:
        return None
    return {k: v / total for k, v in r.items()}


def layer_output_law(target: dict, small: dict, M1: int, M2: int) -> dict[tuple, float]:
    """Exact law of the ordered output list of one verified layer.

    Enumerates every draw of the ``M2`` layer nodes from ``small``, every
    accept/reject branch and every padding draw.  Keys of ``target`` and
    ``small`` are arbitrary hashable outcomes.
    """
    law = defaultdict(float)

    def pad(out, p, w):
        if len(out) == M2:
            law[tuple(out)] += w
            return
        for k, pk in p.items():
            pad(out + [k], target, w * pk)

    def visit(i, out, p, w):
        if w == 0.0:
            return
        if i == M2:
            if len(out) < M1:
                pad(out, p, w)
            else:
                law[tuple(out)] += w
            return
        for k, qk in small.items():
            a = min(1.0, p.get(k, 0.0) / qk)
            if a > 0.0:
                visit(i + 1, out + [k], target, w * qk * a)
            if a < 1.0:
                r = _residual_law(p, small)
                if r is not None:
                    visit(i + 1, out, r, w * qk * (1.0 - a))

    visit(0, [], target, 1.0)
    return dict(law)
