import math
from collections import Counter, defaultdict

import numpy as np
import pytest

from speclab.decoders import DecodeConfig, run_decoder
from speclab.errors import AllRejected
from speclab.fixtures import random_pair
from speclab.lm import TabularLM, chain_lm, uniform_lm
from speclab.oracles import beam_sequence_law, law_tv, layer_output_law, target_sequence_law
from speclab.rng import make_rng, substream
from speclab.sbd import (TreeNode, build_draft_tree, layer_beam_distribution, product_to_array,
                         rwbd_reference, sbd_decode, sbd_step, verify_layer)


def two_token_dists(p, q):
    P = {(0, v): w for v, w in enumerate(p)}
    Q = {(0, v): w for v, w in enumerate(q)}
    return P, Q


# layer distribution


def test_layer_distribution_examples():
    row = [0.1, 0.2, 0.7]
    assert product_to_array(layer_beam_distribution([row], [1.0]), 1, 3).tolist() == \
        pytest.approx(row)
    d = layer_beam_distribution([[0.5, 0.5], [0.3, 0.7]], [1.0, 0.0])
    assert set(d) == {(0, 0), (0, 1)}
    d = layer_beam_distribution([[0.5, 0.5], [0.5, 0.5]], [0.2, 0.6])
    assert product_to_array(d, 2, 2) == pytest.approx([0.125, 0.125, 0.375, 0.375])


def test_layer_distribution_all_rejected():
    with pytest.raises(AllRejected):
        layer_beam_distribution([[0.5, 0.5]], [0.0])


# draft tree


def test_tree_on_chain_is_degenerate():
    tree = build_draft_tree(chain_lm(4), [(0,)], 3, 2, make_rng(0))
    assert [[n.seq for n in layer] for layer in tree.layers] == [[(0, 1)] * 3, [(0, 1, 2)] * 3]
    assert all(n.q_prob == pytest.approx(1 / 3) for n in tree.layers[1])
    assert tree.small_dists[0] == {(0, 1): 1.0}


@pytest.mark.parametrize("gamma,M2", [(1, 1), (2, 3), (3, 2)])
def test_tree_shape(pair7, gamma, M2):
    _, q = pair7
    tree = build_draft_tree(q, [(1,), (2,)], M2, gamma, make_rng(1))
    assert tree.depth == gamma and all(len(layer) == M2 for layer in tree.layers)
    for i, layer in enumerate(tree.layers, 1):
        parents = tree.parent_seqs(i)
        assert all(n.seq == parents[n.parent] + (n.token,) for n in layer)


def test_tree_uniform_draws_are_fair():
    q = uniform_lm(2)
    n, ones = 100_000, 0
    for i in range(n):
        tree = build_draft_tree(q, [()], 2, 1, substream(0, i))
        ones += sum(node.token for node in tree.layers[0])
    freq = ones / (2 * n)
    assert abs(freq - 0.5) < 3 * math.sqrt(0.25 / (2 * n))


# layer verification


def test_verify_identical_dists_accepts_all(pair7):
    _, q = pair7
    tree = build_draft_tree(q, [(1,)], 3, 1, make_rng(0))
    Q = tree.small_dists[0]
    for seed in range(20):
        v = verify_layer(Q, Q, tree.layers[0], [(1,)], 2, 3, make_rng(seed))
        assert v.cnt == 3 and not v.terminate and v.n_padded == 0
        assert v.scores == tuple(Q[n.key] for n in tree.layers[0])


def test_verify_zero_target_node_rejected():
    P, Q = two_token_dists([1.0, 0.0], [0.5, 0.5])
    node = TreeNode(1, 0, (1,), 0.5)
    for seed in range(20):
        v = verify_layer(P, Q, [node], [()], 1, 1, make_rng(seed))
        assert v.scores == (0.0,) and v.cnt == 0 and v.terminate
        assert v.keys == ((0, 0),)


def test_verify_terminate_iff_below_m1():
    P, Q = two_token_dists([0.7, 0.3], [0.3, 0.7])
    nodes = [TreeNode(1, 0, (1,), 0.7), TreeNode(0, 0, (0,), 0.3)]
    for seed in range(200):
        v = verify_layer(P, Q, nodes, [()], 2, 2, make_rng(seed))
        assert v.terminate == (v.cnt < 2)
        assert len(v.keys) == (2 if v.terminate else v.cnt)
        assert v.n_padded == (2 - v.cnt if v.terminate else 0)


def test_verify_single_sequence_monte_carlo():
    P, Q = two_token_dists([0.7, 0.3], [0.3, 0.7])
    keys, probs = list(Q), [Q[k] for k in Q]
    counts = Counter()
    n = 200_000
    for i in range(n):
        rng = substream(5, i)
        k = keys[int(rng.random() >= probs[0])]
        node = TreeNode(k[1], 0, (k[1],), Q[k])
        counts[verify_layer(P, Q, [node], [()], 1, 1, rng).keys[0]] += 1
    tv = 0.5 * sum(abs(counts[k] / n - P[k]) for k in P)
    assert tv <= 0.01


def test_rejected_parent_has_no_children(pair7):
    p, _ = pair7
    rows = [p.next_dist([a]).tolist() for a in range(3)]
    d = layer_beam_distribution(rows, [0.3, 0.0, 0.2])
    assert not any(j == 1 for j, _ in d)


# exact laws of a verified layer (enumeration oracle)


def exact_layer(q, p, inputs, M1, M2):
    P = layer_beam_distribution([p.next_dist(s).tolist() for s in inputs], [1.0] * len(inputs))
    Q = layer_beam_distribution([q.next_dist(s).tolist() for s in inputs], [1.0] * len(inputs))
    return P, layer_output_law(P, Q, M1, M2)


@pytest.mark.parametrize("M1,M2,inputs", [(1, 1, [(1,)]), (1, 2, [(1,)]), (2, 2, [(1,), (2,)]),
                                          (1, 2, [(0,), (3,)]), (2, 2, [(0,), (0,)])])
def test_first_output_is_exactly_target(pair7, M1, M2, inputs):
    p, q = pair7
    P, law = exact_layer(q, p, inputs, M1, M2)
    first = defaultdict(float)
    for out, w in law.items():
        first[out[0]] += w
    assert sum(law.values()) == pytest.approx(1.0, abs=1e-12)
    assert law_tv(first, P) <= 1e-12


def test_equal_widths_give_iid_outputs(pair7):
    p, q = pair7
    P, law = exact_layer(q, p, [(1,), (2,)], 2, 2)
    joint = {(a, b): P[a] * P[b] for a in P for b in P}
    assert law_tv(law, joint) <= 1e-12


def test_unequal_widths_second_output_is_biased():
    # Documented flaw of the i.i.d. claim: with M1 < M2 the second output only
    # exists when two drafts were accepted, which favours tokens with p >= q.
    P, Q = two_token_dists([0.7, 0.3], [0.3, 0.7])
    law = layer_output_law(P, Q, 1, 2)
    second = defaultdict(float)
    for out, w in law.items():
        if len(out) == 2:
            second[out[1]] += w
    total = sum(second.values())
    cond = {k: w / total for k, w in second.items()}
    assert law_tv(cond, P) > 0.05


def test_verify_layer_matches_exact_law(pair7):
    p, q = pair7
    inputs = [(1,), (2,)]
    P, law = exact_layer(q, p, inputs, 1, 2)
    counts = Counter()
    n = 40_000
    for i in range(n):
        res = sbd_step(q, p, inputs, 1, 2, 1, substream(2, i))
        counts[res.verdicts[0].keys] += 1
    emp = {k: c / n for k, c in counts.items()}
    assert set(emp) <= set(law)
    assert law_tv(emp, law) < 0.02


# full step


def test_step_identical_models_all_accept():
    p, q = random_pair(3, divergence_knob=0.0)
    for seed in range(20):
        res = sbd_step(q, p, [(1,)], 1, 2, 2, make_rng(seed))
        assert res.accepted_layers == 2 and not res.terminated
        assert all(v.cnt == 2 for v in res.verdicts)
        assert len(res.outputs) == 2 and all(len(o) == 4 for o in res.outputs)


@pytest.mark.parametrize("gamma,M1,M2", [(1, 1, 1), (2, 1, 2), (3, 2, 3), (4, 1, 4)])
def test_step_counters_and_shapes(pair7, gamma, M1, M2):
    p, q = pair7
    inputs = [(a,) for a in range(M1)]
    for seed in range(30):
        res = sbd_step(q, p, inputs, M1, M2, gamma, make_rng(seed))
        assert res.large_calls == 1 and res.small_calls == gamma
        assert res.large_units == M1 + gamma * M2
        assert M1 <= len(res.outputs) <= M2
        if res.terminated:
            assert len(res.outputs) == M2 and res.verdicts[-1].cnt < M1
        assert all(any(o[:len(s)] == s for s in inputs) for o in res.outputs)
        assert len({len(o) for o in res.outputs}) == 1
        assert len(res.outputs[0]) == 1 + res.accepted_layers + 1


def test_step_single_beam_first_token_law(pair7):
    p, q = pair7
    n = 200_000
    counts = Counter()
    for i in range(n):
        res = sbd_step(q, p, [(3,)], 1, 1, 1, substream(8, i))
        counts[res.outputs[0][1]] += 1
    row = p.next_dist([3])
    assert 0.5 * sum(abs(counts[v] / n - row[v]) for v in range(4)) <= 0.01


def test_step_rejects_bad_width(pair7):
    p, q = pair7
    with pytest.raises(ValueError):
        sbd_step(q, p, [(1,)], 2, 3, 1, make_rng(0))


def test_sbd_decode_counters(pair7):
    p, q = pair7
    c = DecodeConfig(max_new_tokens=9, gamma=2, min_width=1, max_width=2)
    seq, st = run_decoder("sbd", q, p, [0], c, make_rng(4))
    assert len(seq.generated) == 9 == st.tokens_emitted
    assert st.large_model_calls == st.iterations and st.small_model_calls == 2 * st.iterations
    again = sbd_decode(q, p, [0], c, make_rng(4))
    assert again == seq


# reference sampler


def test_rwbd_fixed_width():
    p, _ = random_pair(2)
    for seed in range(10):
        out = rwbd_reference(p, [(0,)], 3, 3, steps=4, rng=seed)
        assert len(out) == 3 and all(len(s) == 5 for s in out)


def test_rwbd_width_one_is_ancestral_sampling():
    p, _ = random_pair(2, vocab_size=3)
    n = 30_000
    counts = Counter(rwbd_reference(p, [(1,)], 1, 1, steps=2, rng=substream(3, i))[0][1:]
                     for i in range(n))
    law = target_sequence_law(p, [1], 2)
    assert law_tv({k: c / n for k, c in counts.items()}, law) < 0.02


def test_rwbd_equal_widths_draw_from_layer_law():
    p, _ = random_pair(5)
    n = 20_000
    counts = Counter()
    for i in range(n):
        for s in rwbd_reference(p, [(1,), (2,)], 2, 2, steps=1, rng=substream(4, i)):
            counts[s] += 1
    law = beam_sequence_law(p, [(1,), (2,)])
    assert law_tv({k: c / (2 * n) for k, c in counts.items()}, law) < 0.02


def test_rwbd_uniform_target_marginal():
    lm = uniform_lm(2)
    n, ones, draws = 100_000, 0, 0
    for i in range(n):
        out = rwbd_reference(lm, [()], 1, 2, steps=1, rng=substream(6, i))
        ones += sum(s[0] for s in out)
        draws += len(out)
    assert abs(ones / draws - 0.5) < 3 * math.sqrt(0.25 / draws)


def test_rwbd_width_law_bounds():
    with pytest.raises(ValueError):
        rwbd_reference(uniform_lm(2), [()], 1, 2, width_law=lambda rng: 3)
