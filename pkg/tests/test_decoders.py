import itertools
import math
from collections import Counter

import numpy as np
import pytest
from scipy import stats as sps

from speclab.decoders import (DecodeConfig, beam_decode, greedy_decode, mjgd_decode, mjsd_step,
                              optimal_suffix_score, residual_distribution, run_decoder,
                              vanilla_spec_step)
from speclab.errors import BudgetExceeded, ZeroResidual
from speclab.fixtures import beam_example_lm, failing_subprefix_pair, peaked_draft_pair, random_pair
from speclab.lm import TabularLM, WarpSpec, apply_warp, chain_lm, joint_logprob, perplexity, \
    uniform_lm
from speclab.oracles import best_continuation, target_sequence_law, vanilla_emission_law
from speclab.rng import make_rng, substream

ARGMAX = WarpSpec(argmax=True)


def cfg(**kw):
    return DecodeConfig(**kw)


# greedy


def test_greedy_chain_and_uniform():
    out = greedy_decode(chain_lm(4), [1], cfg(max_new_tokens=5, warp_target=ARGMAX))
    assert out.generated == (2, 3, 0, 1, 2)
    out = greedy_decode(uniform_lm(4), [], cfg(max_new_tokens=3, warp_target=ARGMAX))
    assert out.generated == (0, 0, 0)


def test_greedy_argmax_matches_hand_stepping(pair7):
    p, _ = pair7
    ctx, want = [2], []
    for _ in range(4):
        row = p.table[(ctx[-1],)].tolist()
        tok = row.index(max(row))
        want.append(tok)
        ctx.append(tok)
    assert greedy_decode(p, [2], cfg(max_new_tokens=4, warp_target=ARGMAX)).generated == \
        tuple(want)


def test_greedy_stops_on_stop_token():
    out = greedy_decode(chain_lm(4), [0], cfg(max_new_tokens=8, stop_token=2,
                                               warp_target=ARGMAX))
    assert out.generated == (1, 2)


def test_greedy_sampling_is_seeded(pair7):
    p, _ = pair7
    c = cfg(max_new_tokens=6)
    assert greedy_decode(p, [0], c, make_rng(1)) == greedy_decode(p, [0], c, make_rng(1))


# beam


def test_beam_width_one_is_greedy(pair7):
    p, _ = pair7
    c = cfg(max_new_tokens=5, num_beams=1, warp_target=ARGMAX)
    [best] = beam_decode(p, [3], c)
    assert best.tokens == greedy_decode(p, [3], c)


def test_beam_prefers_joint_likelihood():
    lm = beam_example_lm()
    # independent oracle: every 2-token sequence and its probability
    joint = {s: lm.next_dist([])[s[0]] * lm.next_dist([s[0]])[s[1]]
             for s in itertools.product(range(12), repeat=2)}
    ranked = sorted(joint, key=lambda s: (-joint[s], s))
    cands = beam_decode(lm, [], cfg(max_new_tokens=2, num_beams=2))
    assert [c.tokens.generated for c in cands] == ranked[:2] == [(1, 2), (0, 2)]
    assert math.exp(cands[0].score) == pytest.approx(0.36)
    assert math.exp(cands[1].score) == pytest.approx(0.06)
    # width one commits to the locally best first token
    [g] = beam_decode(lm, [], cfg(max_new_tokens=2, num_beams=1))
    assert g.tokens.generated[0] == 0


def test_beam_scores_are_joint_logprobs(pair7):
    p, _ = pair7
    for c in beam_decode(p, [1], cfg(max_new_tokens=4, num_beams=3)):
        assert c.score == pytest.approx(joint_logprob(p, [1], c.tokens.generated), rel=1e-12)


def test_beam_scores_sorted_descending(pair7):
    p, _ = pair7
    cands = beam_decode(p, [0], cfg(max_new_tokens=3, num_beams=4, beam_mode="stochastic"),
                        rng=make_rng(2))
    scores = [c.score for c in cands]
    assert scores == sorted(scores, reverse=True) and len(cands) == 4


def test_stochastic_beam_on_chain_is_degenerate():
    for seed in range(5):
        cands = beam_decode(chain_lm(4), [0], cfg(max_new_tokens=4, num_beams=3,
                                                   beam_mode="stochastic"), rng=make_rng(seed))
        assert {c.tokens.generated for c in cands} == {(1, 2, 3, 0)}


def test_stochastic_beam_first_step_law():
    # one step from one beam: draws are i.i.d. from the next-token row
    p, _ = random_pair(3)
    counts = Counter()
    c = cfg(max_new_tokens=1, num_beams=2, beam_mode="stochastic")
    n = 20000
    for i in range(n):
        for cand in beam_decode(p, [1], c, rng=substream(0, i)):
            counts[cand.tokens.generated[0]] += 1
    obs = [counts[v] for v in range(4)]
    exp = p.next_dist([1]) * 2 * n
    assert sps.chisquare(obs, exp).pvalue > 1e-3


# MJGD


@pytest.mark.parametrize("warp", [ARGMAX, WarpSpec(), WarpSpec(top_k=2, nucleus_p=0.8)])
def test_mjgd_k1_is_greedy(pair7, warp):
    p, _ = pair7
    c = cfg(max_new_tokens=7, warp_target=warp)
    for seed in range(5):
        assert mjgd_decode(p, [2], 1, c, make_rng(seed)) == greedy_decode(p, [2], c,
                                                                          make_rng(seed))


def test_mjgd_k_equals_n_is_global_optimum(pair7):
    p, _ = pair7
    for start in range(4):
        out = mjgd_decode(p, [start], 4, cfg(max_new_tokens=4, warp_target=ARGMAX))
        best, _ = best_continuation(p, [start], 4)
        assert out.generated == best


def test_mjgd_blocks_are_optimal(pair7):
    p, _ = pair7
    out = mjgd_decode(p, [1], 2, cfg(max_new_tokens=6, warp_target=ARGMAX)).generated
    ctx = [1]
    for i in range(0, 6, 2):
        best, _ = best_continuation(p, ctx, 2)
        assert out[i:i + 2] == best
        ctx += list(best)


def test_mjgd_fixture1_k2_not_worse(pair7):
    p, _ = pair7
    c = cfg(max_new_tokens=4, warp_target=ARGMAX)
    ppl = {k: np.mean([perplexity(p, mjgd_decode(p, [s], k, c)) for s in range(4)])
           for k in (1, 2)}
    assert ppl[2] <= ppl[1]


def test_mjgd_last_block_is_shortened(pair7):
    p, _ = pair7
    assert len(mjgd_decode(p, [0], 3, cfg(max_new_tokens=5, warp_target=ARGMAX)).generated) == 5


def test_mjgd_budget():
    lm = uniform_lm(10)
    with pytest.raises(BudgetExceeded):
        mjgd_decode(lm, [], 7, cfg(max_new_tokens=7))
    with pytest.raises(BudgetExceeded):
        mjgd_decode(lm, [], 3, cfg(max_new_tokens=3, enumeration_budget=999))


# optimal suffix score


def test_optimal_suffix_score(pair7):
    p, _ = pair7
    assert optimal_suffix_score(p, [1], [2, 0], 0) == joint_logprob(p, [1], [2, 0])
    assert optimal_suffix_score(chain_lm(4), [0], [1, 2], 3) == 0.0
    brute = max(joint_logprob(p, [1], [2, 0, a, b]) for a in range(4) for b in range(4))
    assert optimal_suffix_score(p, [1], [2, 0], 2) == pytest.approx(brute, rel=1e-12)


# residual


def test_residual_examples():
    assert residual_distribution([0.5, 0.5], [1.0, 0.0]).tolist() == [0.0, 1.0]
    assert np.allclose(residual_distribution([0.6, 0.3, 0.1], [0.2, 0.5, 0.3]), [1, 0, 0])
    with pytest.raises(ZeroResidual):
        residual_distribution([0.3, 0.7], [0.3, 0.7])


# vanilla speculative step


def test_vanilla_identical_models_accept_everything():
    p, q = random_pair(4, divergence_knob=0.0)
    c = cfg(gamma=3)
    for seed in range(50):
        out = vanilla_spec_step(q, p, [1], c, make_rng(seed))
        assert out.accepted_len == 3 and all(out.accept_flags)


def test_vanilla_zero_target_mass_rejects_first_token():
    p = TabularLM(3, 0, {(): [0.0, 0.5, 0.5]})
    q = TabularLM(3, 0, {(): [1.0, 0.0, 0.0]}, "draft")
    for seed in range(20):
        out = vanilla_spec_step(q, p, [], cfg(gamma=2), make_rng(seed))
        assert out.accepted_len == 0 and out.draft_tokens[0] == 0
        assert out.resampled_token in (1, 2)


def test_vanilla_first_token_closed_form(pair7):
    p, q = pair7
    c = cfg(gamma=2)
    law = vanilla_emission_law(q, p, [1], 2, 1)
    want = p.next_dist([1])
    assert 0.5 * sum(abs(law.get((v,), 0.0) - want[v]) for v in range(4)) <= 1e-12
    # the one-step formula: min(p, q) + P(reject) * residual
    qr, pr = q.next_dist([1]), p.next_dist([1])
    reject = 1.0 - np.minimum(pr, qr).sum()
    direct = np.minimum(pr, qr) + reject * residual_distribution(pr, qr)
    assert np.allclose(direct, pr, atol=1e-15)


def test_vanilla_step_monte_carlo_matches_oracle(pair7):
    p, q = pair7
    c = cfg(gamma=2, warp_draft=WarpSpec(top_k=3), warp_target=WarpSpec(top_k=3))
    law = vanilla_emission_law(q, p, [2], 2, 1, c.warp_draft, c.warp_target)
    counts = Counter()
    n = 20000
    for i in range(n):
        counts[vanilla_spec_step(q, p, [2], c, substream(11, i)).emitted[0]] += 1
    keys = sorted(law)
    assert set(counts) <= {k[0] for k in keys}
    res = sps.chisquare([counts[k[0]] for k in keys], [law[k] * n for k in keys])
    assert res.pvalue > 1e-3


def test_vanilla_emits_eta_plus_one(pair7):
    p, q = pair7
    for seed in range(100):
        out = vanilla_spec_step(q, p, [0], cfg(gamma=3), make_rng(seed))
        assert len(out.emitted) == out.accepted_len + 1 <= 4
        assert out.accept_flags == (True,) * out.accepted_len + (False,) * (
            len(out.accept_flags) - out.accepted_len)


# MJSD step


def test_mjsd_tau_near_one_rejects_all():
    p, q = peaked_draft_pair()
    c = cfg(gamma=3, tau=1 - 1e-9)
    for seed in range(20):
        out = mjsd_step(q, p, [seed % 4], c, make_rng(seed))
        assert out.accepted_len == 0 and len(out.emitted) == 1


def test_mjsd_tau_zero_accepts_all():
    p, q = peaked_draft_pair()
    c = cfg(gamma=3, tau=0.0)
    for seed in range(20):
        out = mjsd_step(q, p, [seed % 4], c, make_rng(seed))
        assert out.accepted_len == 3 and len(out.emitted) == 4


def test_mjsd_longest_prefix_overrides_failing_subprefix():
    p, q = failing_subprefix_pair()
    c = cfg(gamma=2, tau=0.1)
    out = mjsd_step(q, p, [1], c, make_rng(0))
    assert out.draft_tokens == (0, 1)
    # direct evaluation of the two joint ratios on the tables
    r1 = 0.045 / 0.9
    r2 = (0.045 * 0.98) / (0.9 * 0.4)
    assert r1 == pytest.approx(0.05) and r2 == pytest.approx(0.1225)
    got = [math.exp(pl - ql) for pl, ql in zip(out.target_p_logprobs, out.draft_q_logprobs)]
    assert got == pytest.approx([r1, r2], rel=1e-12)
    assert out.accept_flags == (False, True)
    assert out.accepted_len == 2 and out.accepted_tokens == (0, 1)


def test_mjsd_draft_is_best_beam(pair7):
    p, q = pair7
    c = cfg(gamma=3, num_beams=2)
    out = mjsd_step(q, p, [1], c, make_rng(0))
    best = beam_decode(q, [1], c, n_tokens=3, warp=c.warp_draft)[0]
    assert out.draft_tokens == best.tokens.generated


def test_mjsd_resamples_from_target_row(pair7):
    p, q = pair7
    c = cfg(gamma=2, tau=0.9999)
    counts = Counter()
    n = 10000
    for i in range(n):
        out = mjsd_step(q, p, [0], c, substream(1, i))
        assert out.accepted_len == 0
        counts[out.resampled_token] += 1
    assert sps.chisquare([counts[v] for v in range(4)], p.next_dist([0]) * n).pvalue > 1e-3


def test_mjsd_error_bound_holds(pair7):
    p, q = pair7
    c = cfg(gamma=3, tau=0.3, num_beams=2, beam_mode="stochastic")
    for seed in range(300):
        out = mjsd_step(q, p, [seed % 4], c, make_rng(seed))
        for j in range(out.accepted_len):
            pj, qj = math.exp(out.target_p_logprobs[j]), math.exp(out.draft_q_logprobs[j])
            if qj > pj and out.accept_flags[j]:
                assert (qj - pj) / pj < 1 / c.tau - 1


def test_mjsd_warped_joint_option(pair7):
    p, q = pair7
    c = cfg(gamma=2, joint_warped=True, warp_target=WarpSpec(top_k=1))
    out = mjsd_step(q, p, [0], c, make_rng(0))
    row = apply_warp(p.next_dist([0]), c.warp_target)
    assert out.target_p_logprobs[0] == (0.0 if row[out.draft_tokens[0]] == 1 else -math.inf)


def test_decode_config_validation():
    with pytest.raises(ValueError):
        cfg(tau=1.0)
    assert cfg(tau=1.0, allow_tau_one=True).tau == 1.0
    with pytest.raises(ValueError):
        cfg(gamma=0)
    with pytest.raises(ValueError):
        cfg(min_width=3, max_width=2)
    assert cfg(warp_target={"top_k": 2}).warp_target == WarpSpec(top_k=2)


# run_decoder


def test_run_vanilla_identical_models_iterations():
    p, q = random_pair(4, divergence_knob=0.0)
    seq, st = run_decoder("vanilla_spec", q, p, [0], cfg(max_new_tokens=8, gamma=4))
    assert st.iterations == 2 and st.accepted_lengths == [4, 4]
    assert len(seq.generated) == 8 and st.tokens_emitted == 8 and st.truncated_tokens == 2


def test_run_greedy_counts_one_call_per_token(pair7):
    p, _ = pair7
    _, st = run_decoder("greedy", None, p, [0], cfg(max_new_tokens=8))
    assert st.large_model_calls == 8 == st.tokens_emitted


def test_run_mjsd_replay_is_identical(pair7):
    p, q = pair7
    c = cfg(max_new_tokens=12, gamma=3, seed=3)
    a = run_decoder("mjsd", q, p, [1], c)
    b = run_decoder("mjsd", q, p, [1], c)
    assert a[0] == b[0] and a[1] == b[1]


@pytest.mark.parametrize("kind", ["vanilla_spec", "mjsd"])
def test_run_speculative_counters(pair7, kind):
    p, q = pair7
    c = cfg(max_new_tokens=20, gamma=3)
    seq, st = run_decoder(kind, q, p, [2], c, make_rng(9))
    assert st.large_model_calls == st.iterations == len(st.accepted_lengths)
    assert st.tokens_emitted == sum(a + 1 for a in st.accepted_lengths) - st.truncated_tokens
    assert st.tokens_emitted == len(seq.generated) == 20
    assert all(0 <= a <= 3 for a in st.accepted_lengths)


def test_run_stop_token(pair7):
    p, q = pair7
    seq, st = run_decoder("vanilla_spec", q, p, [0], cfg(max_new_tokens=40, stop_token=3))
    gen = seq.generated
    assert gen[-1] == 3 and 3 not in gen[:-1]
    assert st.tokens_emitted == len(gen)


def test_run_beam_and_mjgd_counters(pair7):
    p, _ = pair7
    seq, st = run_decoder("beam", None, p, [0], cfg(max_new_tokens=5, num_beams=2))
    assert st.large_model_calls == 5 and st.tokens_emitted == 5
    assert st.large_input_units == 1 + 2 * 4
    seq, st = run_decoder("mjgd", None, p, [0], cfg(max_new_tokens=5, block_size=2))
    assert st.large_model_calls == 5 and st.iterations == 3 and st.accepted_lengths == [1, 1, 0]


def test_run_unknown_kind(pair7):
    with pytest.raises(ValueError):
        run_decoder("nope", None, pair7[0], [0], cfg())


def test_target_law_helper_consistency(pair7):
    p, _ = pair7
    law = target_sequence_law(p, [1], 2)
    assert sum(law.values()) == pytest.approx(1.0)
    assert law[(0, 1)] == pytest.approx(p.next_dist([1])[0] * p.next_dist([0])[1])
