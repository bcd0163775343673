"""Random width beam decoding (RWBD) and its speculative accelerator (SBD).

Distributions over the extensions of a layer live in the product space
``(parent index, token)``.  They are stored sparsely as ``dict`` objects with
positive entries only, keys in parent-major order, and values as plain Python
floats: the structures are tiny and the Monte Carlo suites call these
functions hundreds of thousands of times.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from itertools import accumulate
from typing import Callable, Sequence

import numpy as np

from .cost import RunStats
from .errors import AllRejected
from .lm import TabularLM, TokenSeq, WarpSpec, apply_warp, joint_logprob
from .rng import make_rng

Key = tuple[int, int]
ProductDist = dict  # Key -> float

# Residual mass at or below this is treated as empty.
_MASS_EPS = 1e-15


@dataclass(frozen=True)
class TreeNode:
    token: int
    parent: int
    seq: tuple[int, ...]
    q_prob: float

    @property
    def key(self) -> Key:
        return (self.parent, self.token)


@dataclass
class DraftTree:
    """Beam-sampling tree drawn from the small model.

    ``layers[i]`` holds the nodes of layer ``i + 1``; their parents index into
    ``inputs`` (first layer) or the previous layer.  ``small_dists[i]`` is the
    small-model layer distribution the nodes of ``layers[i]`` were drawn from.
    """

    inputs: tuple[tuple[int, ...], ...]
    layers: list[list[TreeNode]] = field(default_factory=list)
    small_dists: list[ProductDist] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.layers)

    def parent_seqs(self, layer: int) -> list[tuple[int, ...]]:
        """Sequences of the parents of 1-based ``layer``."""
        if layer == 1:
            return list(self.inputs)
        return [n.seq for n in self.layers[layer - 2]]


@dataclass(frozen=True)
class LayerVerdict:
    """Outcome of verifying one tree layer.

    ``keys``/``sequences`` are the accepted nodes in verification order,
    followed by padding draws when ``terminate`` is set.  ``scores`` has one
    entry per layer node: its target layer probability if accepted, else 0.
    """

    keys: tuple[Key, ...]
    sequences: tuple[tuple[int, ...], ...]
    terminate: bool
    scores: tuple[float, ...]
    cnt: int
    n_padded: int = 0


@dataclass
class SBDStepResult:
    outputs: list[tuple[int, ...]]
    verdicts: list[LayerVerdict]
    tree: DraftTree
    accepted_layers: int
    large_calls: int = 1
    small_calls: int = 0
    large_units: int = 0
    small_units: int = 0

    @property
    def terminated(self) -> bool:
        return bool(self.verdicts) and self.verdicts[-1].terminate


# product-space helpers -------------------------------------------------------


def layer_beam_distribution(rows: Sequence, scores: Sequence[float]) -> ProductDist:
    """Extension probabilities ``scores[j] * rows[j][v]``, normalized.

    Parents with score 0 contribute nothing.  Raises :class:`AllRejected` if
    no parent has a positive score.
    """
    if len(rows) != len(scores):
        raise ValueError("need one score per parent row")
    out = {}
    for j, (row, s) in enumerate(zip(rows, scores)):
        if s <= 0.0:
            continue
        for v, pv in enumerate(row):
            w = s * pv
            if w > 0.0:
                out[(j, v)] = w
    total = math.fsum(out.values())
    if not total > 0.0:
        raise AllRejected("every parent has beam score 0")
    return {k: w / total for k, w in out.items()}


def product_to_array(dist: ProductDist, n_parents: int, vocab_size: int) -> np.ndarray:
    """Dense ``n_parents * vocab_size`` vector, parent-major."""
    out = np.zeros(n_parents * vocab_size)
    for (j, v), w in dist.items():
        out[j * vocab_size + v] = w
    return out


def _residual(p: ProductDist, q: ProductDist) -> ProductDist:
    r = {}
    for k, pk in p.items():
        d = pk - q.get(k, 0.0)
        if d > 0.0:
            r[k] = d
    total = math.fsum(r.values())
    if total <= _MASS_EPS:
        raise AllRejected("residual distribution has no mass")
    return {k: d / total for k, d in r.items()}


def _draw(dist: ProductDist, rng) -> Key:
    keys = list(dist)
    cum = list(accumulate(dist.values()))
    i = bisect_right(cum, rng.random() * cum[-1])
    return keys[min(i, len(keys) - 1)]


def _rows(lm: TabularLM, seqs, warp: WarpSpec | None) -> list[list[float]]:
    if warp is None:
        return [lm.next_dist(s).tolist() for s in seqs]
    return [apply_warp(lm.next_dist(s), warp).tolist() for s in seqs]


# tree construction and verification --------------------------------------------


def build_draft_tree(q_lm: TabularLM, inputs: Sequence, M2: int, gamma: int, rng,
                     warp: WarpSpec | None = None) -> DraftTree:
    """Draw ``gamma`` layers of ``M2`` nodes from the small model.

    Each layer is ``M2`` i.i.d. draws (with replacement) from the small-model
    layer distribution over the previous layer; a node's score for the next
    layer is the probability it was drawn with.
    """
    if M2 < 1 or gamma < 1:
        raise ValueError("need M2 >= 1 and gamma >= 1")
    tree = DraftTree(tuple(tuple(s) for s in inputs))
    parents = list(tree.inputs)
    scores = [1.0] * len(parents)
    for _ in range(gamma):
        dist = layer_beam_distribution(_rows(q_lm, parents, warp), scores)
        layer = []
        for _ in range(M2):
            j, v = _draw(dist, rng)
            layer.append(TreeNode(v, j, parents[j] + (v,), dist[(j, v)]))
        tree.layers.append(layer)
        tree.small_dists.append(dist)
        parents = [n.seq for n in layer]
        scores = [n.q_prob for n in layer]
    return tree


def verify_layer(target_dist: ProductDist, small_dist: ProductDist, layer_nodes,
                 parent_seqs: Sequence, M1: int, M2: int, rng) -> LayerVerdict:
    """Sequential rejection sampling of one layer against the target.

    Node ``s`` is accepted iff ``u < p(s) / small_dist(s)``.  After an
    acceptance ``p`` returns to ``target_dist``; after a rejection it becomes
    the residual ``norm(max(0, p - small_dist))``.  If fewer than ``M1`` nodes
    survive, the output is padded to ``M2`` by drawing from the current ``p``
    (resetting ``p`` to the target after each draw) and the step terminates.
    """
    if not 1 <= M1 <= M2:
        raise ValueError("need 1 <= M1 <= M2")
    p = target_dist
    keys, scores = [], []
    for node in layer_nodes:
        k = node.key
        ratio = p.get(k, 0.0) / small_dist[k]
        if rng.random() < ratio:
            keys.append(k)
            scores.append(target_dist.get(k, 0.0))
            p = target_dist
        else:
            scores.append(0.0)
            p = _residual(p, small_dist)
    cnt = len(keys)
    n_padded = 0
    terminate = cnt < M1
    if terminate:
        while len(keys) < M2:
            keys.append(_draw(p, rng))
            n_padded += 1
            p = target_dist
    seqs = tuple(tuple(parent_seqs[j]) + (v,) for j, v in keys)
    return LayerVerdict(tuple(keys), seqs, terminate, tuple(scores), cnt, n_padded)


def sbd_step(q_lm: TabularLM, p_lm: TabularLM, inputs: Sequence, M1: int, M2: int,
             gamma: int, rng, *, warp_draft: WarpSpec | None = None,
             warp_target: WarpSpec | None = None) -> SBDStepResult:
    """One speculative beam decoding step.

    Draws a tree with the small model, evaluates the target once over every
    input and tree node, and verifies layers in order.  Returns the padded
    output of the first terminating layer, or ``M2`` draws from the target
    layer distribution one past the tree when every layer passes.
    """
    inputs = [tuple(s.tokens if isinstance(s, TokenSeq) else s) for s in inputs]
    if not M1 <= len(inputs) <= M2:
        raise ValueError(f"need M1 <= len(inputs) <= M2, got {len(inputs)} inputs")
    tree = build_draft_tree(q_lm, inputs, M2, gamma, rng, warp_draft)

    # the single batched target evaluation: every input and every tree node
    contexts = inputs + [n.seq for layer in tree.layers for n in layer]
    flat = _rows(p_lm, contexts, warp_target)
    m = len(inputs)
    target_rows = [flat[:m]] + [flat[m + i * M2: m + (i + 1) * M2] for i in range(gamma)]
    n_ctx = len(contexts)
    res = SBDStepResult([], [], tree, 0, large_calls=1, small_calls=gamma,
                        large_units=n_ctx, small_units=len(inputs) + (gamma - 1) * M2)

    scores = [1.0] * len(inputs)
    for i in range(1, gamma + 1):
        target = layer_beam_distribution(target_rows[i - 1], scores)
        verdict = verify_layer(target, tree.small_dists[i - 1], tree.layers[i - 1],
                               tree.parent_seqs(i), M1, M2, rng)
        res.verdicts.append(verdict)
        if verdict.terminate:
            res.outputs = list(verdict.sequences)
            res.accepted_layers = i - 1
            return res
        scores = list(verdict.scores)
    final = layer_beam_distribution(target_rows[gamma], scores)
    last = tree.layers[-1]
    for _ in range(M2):
        j, v = _draw(final, rng)
        res.outputs.append(last[j].seq + (v,))
    res.accepted_layers = gamma
    return res


def best_sequence(p_lm: TabularLM, seqs: Sequence[Sequence[int]], prefix_len: int) -> tuple[int, ...]:
    """Highest target joint likelihood of the generated part; ties go to the smaller sequence."""
    scored = [(-joint_logprob(p_lm, s[:prefix_len], s[prefix_len:]), tuple(s)) for s in seqs]
    return min(scored)[1]


def sbd_decode(q_lm: TabularLM, p_lm: TabularLM, prefix, cfg, rng=None,
               stats: RunStats | None = None) -> TokenSeq:
    """Decode with repeated :func:`sbd_step` and return the best final beam.

    Widths come from ``cfg.min_width``/``cfg.max_width``.  The prompt is
    replicated ``min_width`` times to form the first input layer.
    """
    rng = make_rng(cfg.seed if rng is None else rng)
    prefix = tuple(prefix.tokens if isinstance(prefix, TokenSeq) else prefix)
    n0, n = len(prefix), cfg.max_new_tokens
    beams = [prefix] * cfg.min_width
    while len(beams[0]) - n0 < n:
        res = sbd_step(q_lm, p_lm, beams, cfg.min_width, cfg.max_width, cfg.gamma, rng,
                       warp_draft=cfg.warp_draft, warp_target=cfg.warp_target)
        emitted = res.accepted_layers + 1
        if stats is not None:
            stats.record(res.accepted_layers, emitted, large_calls=res.large_calls,
                         small_calls=res.small_calls, large_units=res.large_units,
                         small_units=res.small_units)
        beams = res.outputs
    surplus = len(beams[0]) - n0 - n
    if surplus > 0:
        beams = [b[: n0 + n] for b in beams]
        if stats is not None:
            stats.truncate(surplus)
    best = best_sequence(p_lm, beams, n0)
    gen = best[n0:]
    if cfg.stop_token is not None and cfg.stop_token in gen:
        cut = gen.index(cfg.stop_token) + 1
        if stats is not None:
            stats.truncate(len(gen) - cut)
        gen = gen[:cut]
    return TokenSeq(prefix + gen, n0)


# reference sampler -------------------------------------------------------------


def uniform_width(M1: int, M2: int) -> Callable:
    def law(rng) -> int:
        return int(rng.integers(M1, M2 + 1))
    return law


def rwbd_reference(p_lm: TabularLM, inputs: Sequence, M1: int, M2: int,
                   width_law: Callable | None = None, steps: int = 1, rng=None,
                   warp: WarpSpec | None = None) -> list[tuple[int, ...]]:
    """Random width beam decoding with the target model alone.

    Each step draws a width ``m`` from ``width_law(rng)`` (default uniform on
    ``[M1, M2]``) and samples ``m`` sequences i.i.d. from the target layer
    distribution; the sampled sequences carry their layer probability as
    score into the next step.
    """
    if not 1 <= M1 <= M2:
        raise ValueError("need 1 <= M1 <= M2")
    rng = make_rng(rng)
    law = width_law or uniform_width(M1, M2)
    beams = [tuple(s.tokens if isinstance(s, TokenSeq) else s) for s in inputs]
    scores = [1.0] * len(beams)
    for _ in range(steps):
        m = law(rng)
        if not M1 <= m <= M2:
            raise ValueError(f"width law returned {m}, outside [{M1}, {M2}]")
        dist = layer_beam_distribution(_rows(p_lm, beams, warp), scores)
        picks = [_draw(dist, rng) for _ in range(m)]
        beams, scores = [beams[j] + (v,) for j, v in picks], [dist[k] for k in picks]
    return beams
