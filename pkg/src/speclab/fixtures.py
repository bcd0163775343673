"""Hand-built and seeded model fixtures used by the tests and the harness."""

from __future__ import annotations

import numpy as np

from .lm import TabularLM, chain_lm, make_random_lm_pair, uniform_lm


def random_pair(seed: int, vocab_size: int = 4, order: int = 1,
                divergence_knob: float = 0.5) -> tuple[TabularLM, TabularLM]:
    """Seeded (target, draft) pair; seed 7 with the defaults is fixture #1."""
    return make_random_lm_pair(vocab_size, order, divergence_knob, seed)


def failing_subprefix_pair() -> tuple[TabularLM, TabularLM]:
    """Order-1, 3-token pair where the joint ratio fails at length 1 but passes at 2.

    From any context except ``(0,)`` the draft strongly prefers token 0, which
    the target nearly never emits; after 0 the target almost surely emits 1.
    With a deterministic two-token beam draft ``[0, 1]`` the joint ratios are
    ``0.05`` and ``0.1225``.  After ``(0,)`` the draft is ``[1, 0]`` with ratios
    ``2.45`` and ``0.1225``.
    """
    q_start, p_start = [0.9, 0.05, 0.05], [0.045, 0.5, 0.455]
    q_zero, p_zero = [0.3, 0.4, 0.3], [0.01, 0.98, 0.01]
    q = {(): q_start, (0,): q_zero, (1,): q_start, (2,): q_start}
    p = {(): p_start, (0,): p_zero, (1,): p_start, (2,): p_start}
    return TabularLM(3, 1, p, "target"), TabularLM(3, 1, q, "draft")


def beam_example_lm() -> TabularLM:
    """Two-step model where the locally best first token loses the two-token race.

    ``p(0) = 0.6, p(1) = 0.4``; after 0 the mass is spread evenly (0.1 each over
    tokens 2..11); after 1 token 2 takes 0.9.  So ``[1, 2]`` scores 0.36 and the
    best sequence starting with 0 only 0.06.
    """
    V = 12
    start = np.zeros(V)
    start[:2] = [0.6, 0.4]
    after0 = np.zeros(V)
    after0[2:] = 0.1
    after1 = np.zeros(V)
    after1[2] = 0.9
    after1[3:] = 0.1 / 9
    table = {(): start, (0,): after0, (1,): after1}
    for a in range(2, V):
        table[(a,)] = np.full(V, 1.0 / V)
    return TabularLM(V, 1, table)


def peaked_draft_pair(vocab_size: int = 4, peak: float = 0.7) -> tuple[TabularLM, TabularLM]:
    """Uniform target against a draft that puts ``peak`` on one token per context.

    Every joint ratio of a most-likely draft is below 1, which pins the
    threshold endpoints.
    """
    V = vocab_size
    rest = (1.0 - peak) / (V - 1)
    table = {}
    for ctx in [()] + [(a,) for a in range(V)]:
        hot = (ctx[0] + 1) % V if ctx else 0
        row = np.full(V, rest)
        row[hot] = peak
        table[ctx] = row
    return uniform_lm(V, 1), TabularLM(V, 1, table, "draft")


def identical_pair(seed: int = 7, vocab_size: int = 4, order: int = 1):
    return make_random_lm_pair(vocab_size, order, 0.0, seed)


NAMED = {
    "failing_subprefix": failing_subprefix_pair,
    "peaked_draft": peaked_draft_pair,
    "identical": identical_pair,
    "chain": lambda: (chain_lm(4), chain_lm(4, role="draft")),
    "beam_example": lambda: (beam_example_lm(), beam_example_lm()),
}


def named_pair(name: str) -> tuple[TabularLM, TabularLM]:
    try:
        return NAMED[name]()
    except KeyError:
        raise ValueError(f"unknown fixture {name!r}; known: {sorted(NAMED)}") from None
