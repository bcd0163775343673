"""Desk-scale lab for speculative decoding over exactly evaluable tabular models."""

from .cost import CostParams, RunStats, energy_estimate, fit_cost_params, speedup_report
from .decoders import (DecodeConfig, StepOutcome, BeamCandidate, beam_decode, greedy_decode,
                       mjgd_decode, mjsd_step, optimal_suffix_score, residual_distribution,
                       run_decoder, vanilla_spec_step)
from .errors import (AllRejected, BudgetExceeded, ConfigError, DegenerateFit, MissingContext,
                     ModelFormatError, SpecLabError, ZeroResidual)
from .estimators import SpeculativeDecoder
from .lm import (TabularLM, TokenSeq, Vocab, WarpSpec, apply_warp, joint_logprob,
                 make_random_lm_pair, next_dist, perplexity)
from .sbd import (DraftTree, LayerVerdict, build_draft_tree, layer_beam_distribution,
                  rwbd_reference, sbd_decode, sbd_step, verify_layer)

__version__ = "0.1.0"
