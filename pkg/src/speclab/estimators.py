"""scikit-learn style front end: configure with parameters, ``fit`` the model
pair, ``predict`` continuations for a batch of prompts."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cost import RunStats
from .decoders import DECODER_KINDS, DecodeConfig, run_decoder
from .lm import TabularLM, TokenSeq, WarpSpec, perplexity
from .rng import substream
from .validation import check_model_pair, check_prefixes

_NEEDS_DRAFT = ("vanilla_spec", "mjsd", "sbd")


def _warp(w) -> WarpSpec:
    if w is None:
        return WarpSpec()
    if isinstance(w, WarpSpec):
        return w
    return WarpSpec.from_dict(w)


class SpeculativeDecoder(BaseEstimator):
    """Decode prompts with one of the algorithms in :mod:`speclab.decoders`.

    Parameters mirror :class:`~speclab.decoders.DecodeConfig`; ``kind`` picks
    the algorithm.  Prompt ``i`` of a ``predict`` call always uses random
    substream ``i`` of ``seed``, so results do not depend on batch order.

    Attributes
    ----------
    target_, draft_ : TabularLM
    stats_ : list of RunStats, one per prompt of the last ``predict``.
    """

    def __init__(self, kind="vanilla_spec", max_new_tokens=16, gamma=4, tau=0.1,
                 num_beams=1, block_size=1, min_width=1, max_width=1, warp_draft=None,
                 warp_target=None, beam_mode="deterministic", draft_select="best",
                 joint_warped=False, stop_token=None, seed=0):
        self.kind = kind
        self.max_new_tokens = max_new_tokens
        self.gamma = gamma
        self.tau = tau
        self.num_beams = num_beams
        self.block_size = block_size
        self.min_width = min_width
        self.max_width = max_width
        self.warp_draft = warp_draft
        self.warp_target = warp_target
        self.beam_mode = beam_mode
        self.draft_select = draft_select
        self.joint_warped = joint_warped
        self.stop_token = stop_token
        self.seed = seed

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(
            max_new_tokens=self.max_new_tokens, gamma=self.gamma, tau=self.tau,
            num_beams=self.num_beams, warp_draft=_warp(self.warp_draft),
            warp_target=_warp(self.warp_target), seed=self.seed,
            stop_token=self.stop_token, block_size=self.block_size,
            min_width=self.min_width, max_width=self.max_width, beam_mode=self.beam_mode,
            draft_select=self.draft_select, joint_warped=self.joint_warped)

    def fit(self, target: TabularLM, draft: TabularLM | None = None):
        if self.kind not in DECODER_KINDS:
            raise ValueError(f"unknown kind {self.kind!r}; expected one of {DECODER_KINDS}")
        check_model_pair(target, draft)
        if self.kind in _NEEDS_DRAFT and draft is None:
            raise ValueError(f"kind {self.kind!r} needs a draft model")
        self.decode_config()  # validates the parameters
        self.target_ = target
        self.draft_ = draft
        return self

    def predict(self, prefixes) -> list[TokenSeq]:
        check_is_fitted(self, "target_")
        prefixes = check_prefixes(prefixes, [self.target_, self.draft_])
        cfg = self.decode_config()
        out, self.stats_ = [], []
        for i, prefix in enumerate(prefixes):
            seq, stats = run_decoder(self.kind, self.draft_, self.target_, prefix, cfg,
                                     substream(self.seed, i))
            out.append(seq)
            self.stats_.append(stats)
        return out

    @property
    def total_stats_(self) -> RunStats:
        check_is_fitted(self, "stats_")
        return sum(self.stats_, RunStats())

    def score(self, prefixes) -> float:
        """Negative mean target perplexity of the decoded continuations (higher is better)."""
        seqs = self.predict(prefixes)
        return -float(np.mean([perplexity(self.target_, s) for s in seqs]))
