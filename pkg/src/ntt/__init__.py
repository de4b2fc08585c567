"""Twin cascaded attention captioning decoder with visual grounding, on numpy."""

from .attention import RegionFeatures
from .data import (CorpusConfig, SceneRecord, Visual, Vocab, build_vocab, gen_corpus, read_dataset, read_vocab,
                   split_corpus, write_dataset, write_vocab)
from .decoder import ModelConfig, decoder_step, baseline_step, init_params, initial_state
from .grounding import GroundingOutput, ground
from .inference import CaptionHypothesis, ModelScorer, beam_search, generate, greedy_decode, grounding_accuracy
from .metrics import EvalReport, bleu, cider, eval_report
from .tensor import ParamStore, Tensor, finite_diff_check, no_grad, reverse_gradient
from .training import (Checkpoint, CheckpointError, TrainConfig, checkpoint_load, checkpoint_save, derive_seed,
                       evaluate_loss, model_config_for, sequence_loss, token_cross_entropy, train)

__all__ = [
    "RegionFeatures", "CorpusConfig", "SceneRecord", "Visual", "Vocab", "build_vocab", "gen_corpus", "read_dataset",
    "read_vocab", "split_corpus", "write_dataset", "write_vocab", "ModelConfig", "decoder_step", "baseline_step",
    "init_params", "initial_state", "GroundingOutput", "ground", "CaptionHypothesis", "ModelScorer", "beam_search",
    "generate", "greedy_decode", "grounding_accuracy", "EvalReport", "bleu", "cider", "eval_report", "ParamStore",
    "Tensor", "finite_diff_check", "no_grad", "reverse_gradient", "Checkpoint", "CheckpointError", "TrainConfig",
    "checkpoint_load", "checkpoint_save", "derive_seed", "evaluate_loss", "model_config_for", "sequence_loss",
    "token_cross_entropy", "train",
]
