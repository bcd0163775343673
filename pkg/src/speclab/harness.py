"""Experiment configuration, the command implementations and CSV output.

Every command is a pure function of its configuration file and the model
files it names.  Trial ``i`` of a command draws from random substream ``i``
of the configured seed, and rows are written in a fixed order, so reruns
produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import stats as sps

from .cost import CostParams, RunStats, break_even_tokens_per_iteration, energy_estimate, \
    speedup_report, time_estimate
from .decoders import DECODER_KINDS, DecodeConfig, mjsd_step, run_decoder
from .errors import BudgetExceeded, ConfigError, SpecLabError
from .fixtures import NAMED, named_pair, random_pair
from .lm import TabularLM, WarpSpec, perplexity
from .oracles import beam_sequence_law, law_tv, target_sequence_law, vanilla_emission_law
from .rng import substream
from .sbd import sbd_step
from .validation import check_model_pair, check_prefix

SWEEP_AXES = ("K", "tau", "num_beams")
# Feasibility bounds for the exhaustive and Monte Carlo checks.
VANILLA_MAX_VOCAB, VANILLA_MAX_GAMMA = 4, 2
SBD_MAX_VOCAB, SBD_MAX_WIDTH = 4, 2
VANILLA_TV_TOL = 1e-10
MC_TV_TOL = 0.01
MC_ALPHA = 1e-3
# Chi-square bins with fewer expected counts are pooled.
_MIN_EXPECTED = 5.0

_DECODE_FIELDS = {f.name for f in fields(DecodeConfig)}


# configuration --------------------------------------------------------------


def _line_of(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


@dataclass
class ExperimentConfig:
    """One experiment, loaded from a JSON document.

    ``models`` is ``{"target": path, "draft": path}``, ``{"fixture": name}`` or
    ``{"generate": {"vocab_size", "order", "divergence_knob", "seed", "count"}}``.
    Relative paths resolve against ``base_dir`` (the config file's directory).
    """

    models: dict = field(default_factory=lambda: {"fixture": "identical"})
    decoders: list = field(default_factory=lambda: ["greedy"])
    decode: dict = field(default_factory=dict)
    prefixes: list | None = None
    corpus: str | None = None
    trials: int = 1
    seed: int = 0
    cost: dict = field(default_factory=dict)
    output: str | None = None
    sweep: dict = field(default_factory=dict)
    verify: dict = field(default_factory=dict)
    base_dir: str = "."
    name: str = "experiment"

    def __post_init__(self):
        for kind in self.decoders:
            if kind not in DECODER_KINDS:
                raise ConfigError(f"decoders: unknown kind {kind!r}; expected {DECODER_KINDS}")
        unknown = set(self.decode) - _DECODE_FIELDS
        if unknown:
            raise ConfigError(f"decode: unknown field(s) {sorted(unknown)}")
        if int(self.trials) < 1:
            raise ConfigError("trials must be >= 1")
        try:
            self.decode_config()
            self.cost_params()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    # construction

    @classmethod
    def from_dict(cls, data: dict, base_dir: str = ".", name: str = "experiment",
                  text: str | None = None) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config document must be an object")
        known = {f.name for f in fields(cls)} - {"base_dir", "name"}
        for key in data:
            if key not in known:
                line = _line_of(text, key) if text else None
                where = f"line {line}: " if line else ""
                raise ConfigError(f"{where}unknown config key {key!r}")
        try:
            return cls(**data, base_dir=str(base_dir), name=name)
        except ConfigError as exc:
            key = str(exc).split(":", 1)[0]
            line = _line_of(text, key) if text else None
            if line:
                raise ConfigError(f"line {line}: {exc}") from None
            raise

    @classmethod
    def loads(cls, text: str, base_dir: str = ".", name: str = "experiment"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(data, base_dir, name, text)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        try:
            return cls.loads(text, str(path.parent), path.stem)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name not in ("base_dir", "name")}

    # derived objects

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def decode_config(self, **overrides) -> DecodeConfig:
        d = dict(self.decode)
        d.setdefault("seed", self.seed)
        for w in ("warp_draft", "warp_target"):
            if isinstance(d.get(w), dict):
                d[w] = WarpSpec.from_dict(d[w])
        d.update(overrides)
        return DecodeConfig(**d)

    def cost_params(self) -> CostParams:
        return CostParams.from_dict(self.cost)

    def model_pairs(self) -> list[tuple[str, TabularLM, TabularLM]]:
        """``(label, target, draft)`` for every model pair the config names."""
        m = self.models
        try:
            if "fixture" in m:
                target, draft = named_pair(m["fixture"])
                pairs = [(m["fixture"], target, draft)]
            elif "generate" in m:
                g = dict(m["generate"])
                count = int(g.pop("count", 1))
                seed = int(g.pop("seed", self.seed))
                pairs = [(f"seed{s}", *random_pair(s, **g)) for s in range(seed, seed + count)]
            elif "target" in m:
                target = TabularLM.load(self.resolve(m["target"]), role="target")
                draft = (TabularLM.load(self.resolve(m["draft"]), role="draft")
                         if m.get("draft") else None)
                pairs = [(Path(m["target"]).stem, target, draft)]
            else:
                raise ConfigError("models: need 'fixture', 'generate' or 'target'")
        except (TypeError, ValueError, OSError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"models: {exc}") from None
        for _, target, draft in pairs:
            check_model_pair(target, draft)
        return pairs

    def prefix_list(self) -> list[tuple[int, ...]]:
        if self.corpus is not None:
            return read_corpus(self.resolve(self.corpus))
        if self.prefixes is None:
            return [()]
        return [tuple(int(t) for t in p) for p in self.prefixes]

    def output_path(self, command: str) -> Path:
        if self.output:
            return self.resolve(self.output)
        return Path(self.base_dir) / f"{self.name}.{command}.csv"


def read_corpus(path) -> list[tuple[int, ...]]:
    """Newline-delimited whitespace-separated token ids; blank lines are empty prompts."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            try:
                out.append(tuple(int(t) for t in line.split()))
            except ValueError:
                raise ConfigError(f"{path}: line {lineno}: expected integer token ids") from None
    return out


# output --------------------------------------------------------------------------


def _cell(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(_cell(x) for x in v)
    if v is None:
        return ""
    return str(v)


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(rows_to_csv(rows, columns))
    return path


@dataclass
class CommandResult:
    rows: list[dict]
    columns: list[str]
    passed: bool
    summary: str
    path: Path | None = None
    reports: list = field(default_factory=list)


def _finish(cfg: ExperimentConfig, command: str, rows, columns, passed, summary,
            write: bool = True, reports=()) -> CommandResult:
    path = write_csv(cfg.output_path(command), rows, columns) if write else None
    return CommandResult(rows, list(columns), passed, summary, path, list(reports))


def _trial_plan(cfg: ExperimentConfig, models: Sequence[TabularLM]):
    """``(prefix index, prefix, trial, substream index)`` in a fixed order."""
    prefixes = cfg.prefix_list()
    for pi, prefix in enumerate(prefixes):
        check_prefix(prefix, models)
    idx = 0
    for pi, prefix in enumerate(prefixes):
        for t in range(int(cfg.trials)):
            yield pi, prefix, t, idx
            idx += 1


# decode ---------------------------------------------------------------------------

DECODE_COLUMNS = [
    "decoder", "pair", "prefix_index", "trial", "prefix", "generated", "perplexity",
    "iterations", "accepted_lengths", "tokens_emitted", "truncated_tokens",
    "large_model_calls", "small_model_calls", "large_input_units", "small_input_units",
    "energy_j", "time_s",
]


def cmd_decode(cfg: ExperimentConfig, write: bool = True) -> CommandResult:
    dcfg = cfg.decode_config()
    params = cfg.cost_params()
    rows, ok = [], True
    for label, target, draft in cfg.model_pairs():
        for kind in cfg.decoders:
            if kind in ("vanilla_spec", "mjsd", "sbd") and draft is None:
                raise ConfigError(f"decoder {kind!r} needs a draft model")
            for pi, prefix, t, idx in _trial_plan(cfg, [target, draft]):
                seq, st = run_decoder(kind, draft, target, prefix, dcfg, substream(cfg.seed, idx))
                gen = seq.generated
                ok &= st.tokens_emitted == len(gen)
                ok &= all(0 <= a <= max(dcfg.gamma, dcfg.block_size) for a in st.accepted_lengths)
                if kind == "greedy":
                    ok &= st.large_model_calls == st.tokens_emitted
                rows.append(dict(
                    decoder=kind, pair=label, prefix_index=pi, trial=t, prefix=list(prefix),
                    generated=list(gen), perplexity=perplexity(target, seq),
                    iterations=st.iterations, accepted_lengths=st.accepted_lengths,
                    tokens_emitted=st.tokens_emitted, truncated_tokens=st.truncated_tokens,
                    large_model_calls=st.large_model_calls,
                    small_model_calls=st.small_model_calls,
                    large_input_units=st.large_input_units,
                    small_input_units=st.small_input_units,
                    energy_j=energy_estimate(st, params), time_s=time_estimate(st, params)))
    ppl = np.mean([r["perplexity"] for r in rows]) if rows else float("nan")
    summary = (f"decode: {len(rows)} runs, mean perplexity {ppl:.6g}, "
               f"{'PASS' if ok else 'FAIL'}")
    return _finish(cfg, "decode", rows, DECODE_COLUMNS, ok, summary, write)


# verify-dist -------------------------------------------------------------------------


@dataclass(frozen=True)
class EquivalenceReport:
    """Distance between a decoder's output law and its exact target law."""

    decoder: str
    oracle: str
    label: str
    tv: float
    chi2: float | None
    p_value: float | None
    trials: int
    passed: bool
    acceptance_rate: float | None = None

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def line(self) -> str:
        parts = [f"{self.decoder}/{self.oracle} [{self.label}]", f"TV={self.tv:.3g}"]
        if self.p_value is not None:
            parts.append(f"chi2={self.chi2:.4g} p={self.p_value:.4g}")
        if self.acceptance_rate is not None:
            parts.append(f"accept={self.acceptance_rate:.4f}")
        parts.append("PASS" if self.passed else "FAIL")
        return " ".join(parts)


REPORT_COLUMNS = [f.name for f in fields(EquivalenceReport)]


def goodness_of_fit(counts: Counter, law: dict, trials: int) -> tuple[float, float, float]:
    """``(tv, chi2, p_value)`` of observed ``counts`` against the exact ``law``.

    Bins with small expected counts are pooled; any observation outside the
    support of ``law`` fails outright with p-value 0.
    """
    keys = sorted(law)
    tv = 0.5 * sum(abs(counts.get(k, 0) / trials - law[k]) for k in keys)
    stray = sum(c for k, c in counts.items() if k not in law)
    tv += 0.5 * stray / trials
    if stray:
        return tv, math.inf, 0.0
    obs, exp = [], []
    pool_o = pool_e = 0.0
    for k in keys:
        e = law[k] * trials
        if e < _MIN_EXPECTED:
            pool_o += counts.get(k, 0)
            pool_e += e
        else:
            obs.append(counts.get(k, 0))
            exp.append(e)
    if pool_e > 0:
        obs.append(pool_o)
        exp.append(pool_e)
    if len(obs) < 2:
        return tv, 0.0, 1.0
    exp = np.asarray(exp) * (sum(obs) / sum(exp))
    res = sps.chisquare(np.asarray(obs, float), exp)
    return tv, float(res.statistic), float(res.pvalue)


def verify_vanilla(q_lm: TabularLM, p_lm: TabularLM, prefix, dcfg: DecodeConfig,
                   length: int = 3, label: str = "") -> EquivalenceReport:
    """Exact per-position check of token-level speculative sampling."""
    if p_lm.vocab.size > VANILLA_MAX_VOCAB or dcfg.gamma > VANILLA_MAX_GAMMA:
        raise BudgetExceeded(
            f"closed-form check needs vocab <= {VANILLA_MAX_VOCAB} and gamma <= "
            f"{VANILLA_MAX_GAMMA}, got {p_lm.vocab.size} and {dcfg.gamma}")
    got = vanilla_emission_law(q_lm, p_lm, prefix, dcfg.gamma, length,
                               dcfg.warp_draft, dcfg.warp_target)
    want = target_sequence_law(p_lm, prefix, length, dcfg.warp_target)
    tv = law_tv(got, want)
    return EquivalenceReport("vanilla_spec", "closed-form", label, tv, None, None, 0,
                             tv <= VANILLA_TV_TOL)


def sbd_monte_carlo(q_lm: TabularLM, p_lm: TabularLM, inputs, M1: int, M2: int,
                    trials: int, seed: int, label: str = "") -> list[EquivalenceReport]:
    """Monte Carlo check of the first-layer output law of speculative beam decoding.

    Trial ``i`` runs one step with ``gamma = 1`` on substream ``i``.  The first
    output sequence is compared with the exact target layer law.  When
    ``M1 == M2`` the second output and the pair are compared as well (with the
    independent product law for the pair).
    """
    if p_lm.vocab.size > SBD_MAX_VOCAB or M2 > SBD_MAX_WIDTH:
        raise BudgetExceeded(
            f"Monte Carlo check needs vocab <= {SBD_MAX_VOCAB} and M2 <= {SBD_MAX_WIDTH}")
    inputs = [tuple(s) for s in inputs]
    law = beam_sequence_law(p_lm, inputs)
    first, second, pairs = Counter(), Counter(), Counter()
    accepted = 0
    for i in range(trials):
        res = sbd_step(q_lm, p_lm, inputs, M1, M2, 1, substream(seed, i))
        v = res.verdicts[0]
        accepted += v.cnt
        first[v.sequences[0]] += 1
        if M1 == M2 and M2 > 1:
            second[v.sequences[1]] += 1
            pairs[v.sequences[:2]] += 1
    rate = accepted / (trials * M2)

    def report(what, counts, target_law):
        tv, chi2, pv = goodness_of_fit(counts, target_law, trials)
        return EquivalenceReport("sbd", "monte-carlo", f"{label} {what}".strip(), tv, chi2, pv,
                                 trials, pv > MC_ALPHA and tv <= MC_TV_TOL, rate)

    out = [report("first", first, law)]
    if M1 == M2 and M2 > 1:
        joint = {(a, b): law[a] * law[b] for a in law for b in law}
        out.append(report("second", second, law))
        out.append(report("pair", pairs, joint))
    return out


def cmd_verify_dist(cfg: ExperimentConfig, write: bool = True) -> CommandResult:
    v = dict(cfg.verify)
    kind = v.pop("kind", "vanilla_spec")
    reports = []
    if kind == "vanilla_spec":
        dcfg = cfg.decode_config()
        length = int(v.pop("length", 3))
        for label, target, draft in cfg.model_pairs():
            for prefix in cfg.prefix_list():
                check_prefix(prefix, [target, draft])
                reports.append(verify_vanilla(draft, target, prefix, dcfg, length,
                                              f"{label} prefix={list(prefix)}"))
    elif kind == "sbd":
        M1, M2 = int(v.pop("M1", 1)), int(v.pop("M2", 2))
        gamma = int(v.pop("gamma", 1))
        if gamma != 1:
            raise BudgetExceeded("the Monte Carlo check is defined for gamma = 1")
        trials = int(v.pop("trials", cfg.trials if cfg.trials > 1 else 200_000))
        inputs = v.pop("inputs", None)
        for label, target, draft in cfg.model_pairs():
            ins = [tuple(s) for s in inputs] if inputs is not None else cfg.prefix_list()[:M1]
            for s in ins:
                check_prefix(s, [target, draft])
            reports += sbd_monte_carlo(draft, target, ins, M1, M2, trials, cfg.seed, label)
    else:
        raise ConfigError(f"verify.kind must be 'vanilla_spec' or 'sbd', got {kind!r}")
    if v:
        raise ConfigError(f"verify: unknown field(s) {sorted(v)}")
    passed = all(r.passed for r in reports)
    summary = (f"verify-dist: {sum(r.passed for r in reports)}/{len(reports)} passed, "
               f"max TV {max(r.tv for r in reports):.3g}, {'PASS' if passed else 'FAIL'}")
    rows = [r.as_dict() for r in reports]
    return _finish(cfg, "verify-dist", rows, REPORT_COLUMNS, passed, summary, write, reports)


# sweep ------------------------------------------------------------------------------

SWEEP_COLUMNS = [
    "axis", "value", "mean_perplexity", "std_perplexity", "mean_accepted", "std_accepted",
    "mean_draft_q_logprob", "frac_le_first", "n_pairs", "runs",
]


def _pair_means(cfg: ExperimentConfig, kind: str, dcfg: DecodeConfig):
    """Per-pair mean perplexity and mean accepted length of full decodes."""
    ppl, acc = [], []
    for _, target, draft in cfg.model_pairs():
        vals, lens = [], []
        for _, prefix, _, idx in _trial_plan(cfg, [target, draft]):
            seq, st = run_decoder(kind, draft, target, prefix, dcfg, substream(cfg.seed, idx))
            vals.append(perplexity(target, seq))
            lens.extend(st.accepted_lengths)
        ppl.append(float(np.mean(vals)))
        acc.append(float(np.mean(lens)))
    return np.array(ppl), np.array(acc)


def _replayed_steps(cfg: ExperimentConfig, dcfg: DecodeConfig):
    """Single MJSD steps from every prefix with a fixed substream each."""
    outs = []
    for _, target, draft in cfg.model_pairs():
        for _, prefix, _, idx in _trial_plan(cfg, [target, draft]):
            outs.append(mjsd_step(draft, target, prefix, dcfg, substream(cfg.seed, idx)))
    return outs


def cmd_sweep(cfg: ExperimentConfig, axis: str | None = None, values=None,
              write: bool = True) -> CommandResult:
    axis = axis or cfg.sweep.get("axis")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = list(values if values is not None else cfg.sweep.get("values", []))
    if not values:
        raise ConfigError("sweep: no values given")
    rows, ok, checks = [], True, []
    base = None
    per_value_eta = []
    for val in values:
        row = dict(axis=axis, value=val, n_pairs=len(cfg.model_pairs()))
        if axis == "K":
            dcfg = cfg.decode_config(block_size=int(val))
            ppl, acc = _pair_means(cfg, "mjgd", dcfg)
            if base is None:
                base = ppl
            row.update(mean_accepted=float(np.mean(acc)), std_accepted=float(np.std(acc)),
                       frac_le_first=float(np.mean(ppl <= base)))
        else:
            field_name = "tau" if axis == "tau" else "num_beams"
            val = float(val) if axis == "tau" else int(val)
            dcfg = cfg.decode_config(**{field_name: val})
            ppl, _ = _pair_means(cfg, "mjsd", dcfg)
            steps = _replayed_steps(cfg, dcfg)
            eta = np.array([s.accepted_len for s in steps])
            per_value_eta.append((eta, np.array([s.draft_q_logprobs[-1] for s in steps])))
            row.update(mean_accepted=float(eta.mean()), std_accepted=float(eta.std()),
                       mean_draft_q_logprob=float(per_value_eta[-1][1].mean()))
        row.update(mean_perplexity=float(np.mean(ppl)), std_perplexity=float(np.std(ppl)),
                   runs=int(ppl.size * len(cfg.prefix_list()) * cfg.trials))
        rows.append(row)

    if axis == "K" and len(rows) > 1:
        frac = rows[1]["frac_le_first"]
        lower = rows[1]["mean_perplexity"] < rows[0]["mean_perplexity"]
        checks.append(f"K={values[1]} not worse on {frac:.0%} of pairs, mean lower: {lower}")
        ok = frac >= 0.8 and lower
    elif axis == "tau":
        mono = all(np.all(b[0] <= a[0]) for a, b in zip(per_value_eta, per_value_eta[1:]))
        checks.append(f"accepted length non-increasing in tau: {mono}")
        ok = bool(mono)
    elif axis == "num_beams":
        mono = all(np.all(b[1] >= a[1] - 1e-12) for a, b in zip(per_value_eta, per_value_eta[1:]))
        checks.append(f"draft q-likelihood non-decreasing in beams: {mono}")
        if cfg.decode_config().gamma <= 2:
            ok = bool(mono)
    summary = f"sweep {axis}: {len(rows)} values; " + "; ".join(checks) + \
              f"; {'PASS' if ok else 'FAIL'}"
    return _finish(cfg, f"sweep-{axis}", rows, SWEEP_COLUMNS, ok, summary, write)


# compare ------------------------------------------------------------------------------

COMPARE_COLUMNS = [
    "decoder", "runs", "tokens", "iterations", "mean_accepted", "tokens_per_iteration",
    "tokens_per_s", "j_per_token", "speedup_vs_greedy", "energy_ratio_vs_greedy",
    "break_even_tokens_per_iteration", "beats_greedy_energy", "consistent",
]


def cmd_compare(cfg: ExperimentConfig, write: bool = True) -> CommandResult:
    """Aggregate counters per decoder and price them with the cost model.

    Greedy is always included as the baseline.  For each speculative decoder
    the break-even tokens per iteration (its energy per iteration over greedy's
    energy per token) is reported together with the check that exceeding it is
    the same as beating greedy on joules per token.
    """
    dcfg = cfg.decode_config()
    params = cfg.cost_params()
    kinds = ["greedy"] + [k for k in cfg.decoders if k != "greedy"]
    totals = {}
    for kind in kinds:
        total, runs = RunStats(), 0
        for _, target, draft in cfg.model_pairs():
            for _, prefix, _, idx in _trial_plan(cfg, [target, draft]):
                _, st = run_decoder(kind, draft, target, prefix, dcfg, substream(cfg.seed, idx))
                total = total + st
                runs += 1
        totals[kind] = (total, runs)
    greedy = totals["greedy"][0]
    rows, ok = [], True
    for kind in kinds:
        st, runs = totals[kind]
        cmp = speedup_report(greedy, st, params)
        e_tok = cmp.energy_per_token_b
        tpi = st.tokens_emitted / st.iterations
        be = break_even_tokens_per_iteration(st, greedy, params)
        beats = e_tok < cmp.energy_per_token_a
        consistent = (tpi > be) == beats or math.isclose(tpi, be)
        ok &= consistent
        rows.append(dict(
            decoder=kind, runs=runs, tokens=st.tokens_emitted, iterations=st.iterations,
            mean_accepted=st.mean_accepted_length, tokens_per_iteration=tpi,
            tokens_per_s=1.0 / cmp.time_per_token_b, j_per_token=e_tok,
            speedup_vs_greedy=cmp.speedup, energy_ratio_vs_greedy=cmp.energy_ratio,
            break_even_tokens_per_iteration=be, beats_greedy_energy=beats,
            consistent=consistent))
    parts = [f"{r['decoder']} accepted={r['mean_accepted']:.3f} "
             f"J/tok={r['j_per_token']:.4g} (break-even {r['break_even_tokens_per_iteration']:.3f}"
             f" tok/iter vs {r['tokens_per_iteration']:.3f})" for r in rows]
    summary = "compare: " + "; ".join(parts) + f"; {'PASS' if ok else 'FAIL'}"
    return _finish(cfg, "compare", rows, COMPARE_COLUMNS, ok, summary, write)


# gen-fixtures ---------------------------------------------------------------------------


def _dump(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")
    return path


def cmd_gen_fixtures(out_dir, seeds: Sequence[int] = (7,), vocab_size: int = 4,
                     order: int = 1, divergence_knob: float = 0.5) -> list[Path]:
    """Write seeded and hand-built model files plus one example config per command."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s in seeds:
        target, draft = random_pair(s, vocab_size, order, divergence_knob)
        written.append(_dump(out / f"pair{s}_target.json", target.to_dict()))
        written.append(_dump(out / f"pair{s}_draft.json", draft.to_dict()))
    for name in sorted(NAMED):
        target, draft = named_pair(name)
        written.append(_dump(out / f"{name}_target.json", target.to_dict()))
        written.append(_dump(out / f"{name}_draft.json", draft.to_dict()))
    corpus = out / "prefixes.txt"
    corpus.write_text("\n".join(str(a) for a in range(vocab_size)) + "\n", encoding="utf-8")
    written.append(corpus)

    s0 = seeds[0]
    files = {"target": f"pair{s0}_target.json", "draft": f"pair{s0}_draft.json"}
    generated = {"generate": {"vocab_size": vocab_size, "order": order,
                              "divergence_knob": divergence_knob, "seed": 0, "count": 20}}
    configs = {
        "decode": dict(models=files, decoders=["greedy", "vanilla_spec", "mjsd"],
                       decode={"max_new_tokens": 8, "gamma": 2, "tau": 0.1},
                       corpus="prefixes.txt", trials=2, seed=3),
        "verify_vanilla": dict(models=generated, decode={"gamma": 2},
                               verify={"kind": "vanilla_spec", "length": 3}, seed=0),
        "verify_sbd": dict(models=files, verify={"kind": "sbd", "M1": 1, "M2": 2,
                                                 "inputs": [[1]], "trials": 200000}, seed=0),
        "sweep_K": dict(models={"generate": {**generated["generate"], "count": 50}},
                        decode={"max_new_tokens": 4, "warp_target": {"argmax": True}},
                        corpus="prefixes.txt", sweep={"axis": "K", "values": [1, 2, 3]}),
        "sweep_tau": dict(models=files, decode={"max_new_tokens": 8, "gamma": 2},
                          corpus="prefixes.txt", trials=20,
                          sweep={"axis": "tau", "values": [0.0, 0.5, 0.999999999]}),
        "sweep_beams": dict(models=files, decode={"max_new_tokens": 8, "gamma": 2},
                            corpus="prefixes.txt", trials=5,
                            sweep={"axis": "num_beams", "values": [1, 2]}),
        "compare": dict(models={"target": "failing_subprefix_target.json",
                                "draft": "failing_subprefix_draft.json"},
                        decoders=["vanilla_spec", "mjsd"],
                        decode={"max_new_tokens": 16, "gamma": 2, "tau": 0.1},
                        prefixes=[[1], [2]], trials=10, seed=5),
    }
    for name, conf in configs.items():
        ExperimentConfig.from_dict(conf, str(out), name)  # validate before writing
        written.append(_dump(out / f"{name}.json", conf))
    return written


COMMANDS = {
    "decode": cmd_decode,
    "verify-dist": cmd_verify_dist,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}

__all__ = [
    "ExperimentConfig", "EquivalenceReport", "CommandResult", "cmd_decode", "cmd_verify_dist",
    "cmd_sweep", "cmd_compare", "cmd_gen_fixtures", "goodness_of_fit", "sbd_monte_carlo",
    "verify_vanilla", "read_corpus", "rows_to_csv", "SpecLabError",
]
