"""Token vocabularies, exact next-token distributions, warps and tabular models.

Distributions are plain 1-D ``numpy`` float arrays of length ``vocab.size``.
A :class:`TabularLM` maps bounded contexts to such arrays; both the draft and
the target model of every decoder in this package are instances.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from os import PathLike
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import MissingContext, ModelFormatError
from .rng import make_rng

#: Tolerance on the sum of a stored distribution.
DIST_ATOL = 1e-12
#: Tolerance accepted when loading probabilities from a model file.
FILE_ATOL = 1e-9
# Guards the strict "cumulative mass > nucleus_p" test against summation rounding.
_CUM_TOL = 1e-12


@dataclass(frozen=True)
class Vocab:
    """Integer token ids ``0..size-1`` with optional display glyphs."""

    size: int
    glyphs: tuple[str, ...] | None = None

    def __post_init__(self):
        if int(self.size) < 2:
            raise ValueError(f"vocab size must be >= 2, got {self.size}")
        if self.glyphs is not None and len(self.glyphs) != self.size:
            raise ValueError("glyphs must have one entry per token")

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        """Char-level vocab over the distinct characters of ``text``."""
        chars = tuple(sorted(set(text)))
        return cls(len(chars), chars)

    def encode(self, text: str) -> tuple[int, ...]:
        if self.glyphs is None:
            raise ValueError("vocab has no glyphs")
        index = {g: i for i, g in enumerate(self.glyphs)}
        try:
            return tuple(index[c] for c in text)
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in vocab") from None

    def decode(self, tokens: Iterable[int]) -> str:
        if self.glyphs is None:
            return " ".join(str(t) for t in tokens)
        return "".join(self.glyphs[t] for t in tokens)

    def check_tokens(self, tokens: Iterable[int]) -> tuple[int, ...]:
        out = tuple(int(t) for t in tokens)
        for t in out:
            if not 0 <= t < self.size:
                raise ValueError(f"token id {t} outside vocab of size {self.size}")
        return out


@dataclass(frozen=True)
class TokenSeq:
    """A token sequence whose first ``prefix_len`` ids are the given prompt."""

    tokens: tuple[int, ...]
    prefix_len: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not 0 <= self.prefix_len <= len(self.tokens):
            raise ValueError("prefix_len out of range")

    @property
    def prefix(self) -> tuple[int, ...]:
        return self.tokens[: self.prefix_len]

    @property
    def generated(self) -> tuple[int, ...]:
        return self.tokens[self.prefix_len :]

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)


@dataclass(frozen=True)
class WarpSpec:
    """Warping pipeline applied in the fixed order top-k, nucleus, argmax."""

    top_k: int | None = None
    nucleus_p: float | None = None
    argmax: bool = False

    def __post_init__(self):
        if self.top_k is not None and int(self.top_k) < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.nucleus_p is not None and not 0.0 < float(self.nucleus_p) <= 1.0:
            raise ValueError(f"nucleus_p must be in (0, 1], got {self.nucleus_p}")

    @property
    def is_identity(self) -> bool:
        return self.top_k is None and self.nucleus_p is None and not self.argmax

    def without_argmax(self) -> "WarpSpec":
        return WarpSpec(self.top_k, self.nucleus_p, False)

    def to_dict(self) -> dict:
        return {"top_k": self.top_k, "nucleus_p": self.nucleus_p, "argmax": self.argmax}

    @classmethod
    def from_dict(cls, data: Mapping | None) -> "WarpSpec":
        if data is None:
            return cls()
        unknown = set(data) - {"top_k", "nucleus_p", "argmax"}
        if unknown:
            raise ValueError(f"unknown warp fields: {sorted(unknown)}")
        return cls(data.get("top_k"), data.get("nucleus_p"), bool(data.get("argmax", False)))


IDENTITY = WarpSpec()
#: The two-stage warp used by the reference speculative sampling code: top 20, then nucleus 0.9.
DEFAULT_EXPERIMENT_WARP = WarpSpec(top_k=20, nucleus_p=0.9)


def normalize(weights) -> np.ndarray:
    """Scale non-negative ``weights`` to sum to one."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights have no mass")
    return w / total


def check_distribution(probs, atol: float = DIST_ATOL) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1:
        raise ValueError("distribution must be one-dimensional")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("distribution has negative or non-finite entries")
    if abs(p.sum() - 1.0) > atol:
        raise ValueError(f"distribution sums to {p.sum()!r}, not 1")
    return p


def apply_warp(dist, warp: WarpSpec | None) -> np.ndarray:
    """Return the warped copy of ``dist``.

    Top-k keeps the ``k`` most probable tokens; nucleus keeps the shortest
    descending head whose cumulative mass is strictly greater than
    ``nucleus_p`` (all positive entries if none is); argmax puts all mass on
    the most probable token.  Ties always favour the smaller token id.
    """
    out = np.array(dist, dtype=float)
    if warp is None or warp.is_identity:
        return out
    if warp.top_k is not None and warp.top_k < out.size:
        order = np.argsort(-out, kind="stable")
        out[order[warp.top_k :]] = 0.0
        out /= out.sum()
    if warp.nucleus_p is not None and warp.nucleus_p < 1.0:
        order = np.argsort(-out, kind="stable")
        csum = np.cumsum(out[order])
        over = np.flatnonzero(csum > warp.nucleus_p + _CUM_TOL)
        keep = int(over[0]) + 1 if over.size else int(np.count_nonzero(out))
        out[order[keep:]] = 0.0
        out /= out.sum()
    if warp.argmax:
        hot = int(np.argmax(out))
        out[:] = 0.0
        out[hot] = 1.0
    return out


def sample_index(probs, rng: np.random.Generator) -> int:
    """Inverse-CDF draw of one index; consumes exactly one uniform."""
    c = np.cumsum(probs)
    u = rng.random() * c[-1]
    i = int(np.searchsorted(c, u, side="right"))
    if i >= c.size:
        i = int(np.flatnonzero(np.asarray(probs) > 0)[-1])
    return i


class TabularLM:
    """Exact next-token model keyed by the trailing ``order`` tokens.

    ``table`` maps context tuples of length ``<= order`` to distributions.
    Contexts shorter than ``order`` only arise near the start of a sequence
    and are distinct keys; nothing is padded.  Instances are immutable.
    """

    def __init__(self, vocab: Vocab | int, order: int, table: Mapping, role: str = "target",
                 *, check_closed: bool = True):
        self.vocab = vocab if isinstance(vocab, Vocab) else Vocab(int(vocab))
        if int(order) < 0:
            raise ModelFormatError(f"order must be >= 0, got {order}")
        self.order = int(order)
        if role not in ("target", "draft"):
            raise ModelFormatError(f"role must be 'target' or 'draft', got {role!r}")
        self.role = role
        rows = {}
        for ctx, probs in table.items():
            key = tuple(int(t) for t in ctx)
            if len(key) > self.order:
                raise ModelFormatError(f"context {list(key)} longer than order {self.order}")
            try:
                self.vocab.check_tokens(key)
                p = np.asarray(probs, dtype=float)
                if p.shape != (self.vocab.size,):
                    raise ValueError(f"expected {self.vocab.size} probabilities, got {p.size}")
                if abs(p.sum() - 1.0) > DIST_ATOL:
                    p = normalize(p)
                p = check_distribution(p).copy()
            except ValueError as exc:
                raise ModelFormatError(f"context {list(key)}: {exc}") from None
            p.setflags(write=False)
            rows[key] = p
        if not rows:
            raise ModelFormatError("model table is empty")
        self._table = rows
        if check_closed:
            missing = self.unreachable_gaps()
            if missing:
                shown = ", ".join(str(list(m)) for m in missing[:5])
                raise ModelFormatError(
                    f"table is not closed under decoding: {len(missing)} reachable "
                    f"context(s) missing, e.g. {shown}")

    @property
    def table(self) -> Mapping[tuple[int, ...], np.ndarray]:
        return self._table

    def key(self, context: Sequence[int]) -> tuple[int, ...]:
        if self.order == 0:
            return ()
        return tuple(context[-self.order :]) if len(context) else ()

    def next_dist(self, context: Sequence[int]) -> np.ndarray:
        key = self.key(tuple(context))
        try:
            return self._table[key]
        except KeyError:
            raise MissingContext(f"no table row for context {list(key)}") from None

    def successors(self, key: tuple[int, ...]):
        for t in range(self.vocab.size):
            yield self.key(key + (t,))

    def unreachable_gaps(self, starts: Iterable[Sequence[int]] | None = None) -> list:
        """Contexts reachable from ``starts`` (default: every key) with no row."""
        if starts is None:
            frontier = list(self._table)
        else:
            frontier = [self.key(tuple(s)) for s in starts]
        seen, missing = set(), []
        while frontier:
            key = frontier.pop()
            if key in seen:
                continue
            seen.add(key)
            if key not in self._table:
                missing.append(key)
                continue
            frontier.extend(self.successors(key))
        return sorted(missing, key=lambda k: (len(k), k))

    def same_shape(self, other: "TabularLM") -> bool:
        return self.vocab.size == other.vocab.size

    def __eq__(self, other):
        if not isinstance(other, TabularLM):
            return NotImplemented
        return (self.vocab == other.vocab and self.order == other.order
                and self._table.keys() == other._table.keys()
                and all(np.array_equal(v, other._table[k]) for k, v in self._table.items()))

    __hash__ = None

    def __repr__(self):
        return (f"TabularLM(vocab_size={self.vocab.size}, order={self.order}, "
                f"rows={len(self._table)}, role={self.role!r})")

    # serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        keys = sorted(self._table, key=lambda k: (len(k), k))
        out = {"vocab_size": self.vocab.size, "order": self.order, "role": self.role}
        if self.vocab.glyphs is not None:
            out["glyphs"] = list(self.vocab.glyphs)
        out["rows"] = [{"context": list(k), "probs": [float(x) for x in self._table[k]]}
                       for k in keys]
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def save(self, path: str | PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())
            fh.write("\n")

    @classmethod
    def from_dict(cls, data: Mapping, role: str | None = None) -> "TabularLM":
        try:
            vocab_size = int(data["vocab_size"])
            order = int(data["order"])
            rows = data["rows"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"model document missing or bad field: {exc}") from None
        table = {}
        for i, row in enumerate(rows):
            try:
                ctx = tuple(row["context"])
                probs = [float(x) for x in row["probs"]]
            except (KeyError, TypeError, ValueError) as exc:
                raise ModelFormatError(f"rows[{i}]: malformed row ({exc})") from None
            if ctx in table:
                raise ModelFormatError(f"rows[{i}]: duplicate context {list(ctx)}")
            if len(probs) != vocab_size:
                raise ModelFormatError(f"rows[{i}]: expected {vocab_size} probabilities, "
                                       f"got {len(probs)}")
            if any(p < 0 or not math.isfinite(p) for p in probs):
                raise ModelFormatError(f"rows[{i}]: negative or non-finite probability")
            if abs(math.fsum(probs) - 1.0) > FILE_ATOL:
                raise ModelFormatError(f"rows[{i}]: probabilities sum to {math.fsum(probs)!r}")
            table[ctx] = probs
        glyphs = data.get("glyphs")
        vocab = Vocab(vocab_size, tuple(glyphs) if glyphs is not None else None)
        return cls(vocab, order, table, role or data.get("role", "target"))

    @classmethod
    def loads(cls, text: str, role: str | None = None) -> "TabularLM":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(data, role)

    @classmethod
    def load(cls, path: str | PathLike, role: str | None = None) -> "TabularLM":
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        try:
            return cls.loads(text, role)
        except ModelFormatError as exc:
            raise ModelFormatError(f"{path}: {exc}") from None


def next_dist(lm: TabularLM, context: Sequence[int] | TokenSeq) -> np.ndarray:
    """Stored next-token distribution for the trailing context."""
    return lm.next_dist(tuple(context))


def joint_logprob(lm: TabularLM, prefix: Sequence[int], continuation: Sequence[int],
                  warp: WarpSpec | None = None) -> float:
    """Chain-rule log-probability of ``continuation`` after ``prefix``.

    Each factor is optionally warped.  A zero factor yields ``-inf``.
    """
    ctx = list(prefix)
    total = 0.0
    for tok in continuation:
        d = lm.next_dist(ctx)
        if warp is not None:
            d = apply_warp(d, warp)
        pr = d[tok]
        if pr <= 0.0:
            return -math.inf
        total += math.log(pr)
        ctx.append(tok)
    return total


def perplexity(lm: TabularLM, seq: TokenSeq) -> float:
    """exp of the mean negative log-likelihood of the generated part of ``seq``.

    Always scored with the raw (unwarped) distributions of ``lm``.
    """
    n = len(seq.generated)
    if n < 1:
        raise ValueError("perplexity needs at least one generated token")
    lp = joint_logprob(lm, seq.prefix, seq.generated)
    if lp == -math.inf:
        return math.inf
    return math.exp(-lp / n)


# model constructors --------------------------------------------------------


def all_contexts(vocab_size: int, order: int):
    """Every context of length ``0..order`` in canonical (length, lexicographic) order."""
    for n in range(order + 1):
        yield from itertools.product(range(vocab_size), repeat=n)


def uniform_lm(vocab_size: int, order: int = 0, role: str = "target") -> TabularLM:
    row = np.full(vocab_size, 1.0 / vocab_size)
    return TabularLM(vocab_size, order, {c: row for c in all_contexts(vocab_size, order)}, role)


def chain_lm(vocab_size: int, successor=None, role: str = "target") -> TabularLM:
    """Order-1 deterministic chain: token ``a`` is always followed by ``successor(a)``.

    The empty context starts the chain at token 0.
    """
    if successor is None:
        successor = lambda a: (a + 1) % vocab_size  # noqa: E731
    table = {(): np.eye(vocab_size)[0]}
    for a in range(vocab_size):
        table[(a,)] = np.eye(vocab_size)[successor(a)]
    return TabularLM(vocab_size, 1, table, role)


def make_random_lm_pair(vocab_size: int, order: int, divergence_knob: float, seed: int,
                        concentration: float = 1.0) -> tuple[TabularLM, TabularLM]:
    """Seeded (target, draft) pair with draft rows mixed toward noise.

    Each context draws a target row and a noise row from a symmetric Dirichlet;
    the draft row is ``(1 - knob) * target + knob * noise``.  ``knob == 0`` makes
    the draft an exact copy of the target.
    """
    if vocab_size < 2 or order < 0:
        raise ValueError("need vocab_size >= 2 and order >= 0")
    if not 0.0 <= divergence_knob <= 1.0:
        raise ValueError("divergence_knob must be in [0, 1]")
    rng = make_rng(seed)
    alpha = np.full(vocab_size, float(concentration))
    target, draft = {}, {}
    for ctx in all_contexts(vocab_size, order):
        t = normalize(rng.dirichlet(alpha))
        noise = rng.dirichlet(alpha)
        target[ctx] = t
        if divergence_knob == 0.0:
            draft[ctx] = t.copy()
        else:
            draft[ctx] = normalize((1.0 - divergence_knob) * t + divergence_knob * noise)
    return (TabularLM(vocab_size, order, target, "target"),
            TabularLM(vocab_size, order, draft, "draft"))


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())


def mean_row_tv(a: TabularLM, b: TabularLM) -> float:
    """Mean per-context total-variation distance between two models' rows."""
    if a.table.keys() != b.table.keys():
        raise ValueError("models have different context sets")
    return float(np.mean([total_variation(a.table[k], b.table[k]) for k in a.table]))


__all__ = [
    "Vocab", "TokenSeq", "WarpSpec", "IDENTITY", "DEFAULT_EXPERIMENT_WARP", "TabularLM",
    "normalize", "check_distribution", "apply_warp", "sample_index", "next_dist",
    "joint_logprob", "perplexity", "all_contexts", "uniform_lm", "chain_lm",
    "make_random_lm_pair", "total_variation", "mean_row_tv",
]
