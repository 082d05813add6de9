"""fourdeco: joint CTC / RNN-T / attention / Mask-CTC training and one-pass
joint decoding, implemented from scratch in numpy."""
from .core import (AlignmentSeq, BeamConfig, DecoderWeights, EncodedSeq, FeatureSeq, Hypothesis, TokenSeq,
                   Vocabulary, collapse, edit_distance, error_rate, log_sum_exp)
from .losses import TrainWeights, ctc_loss, mlm_loss, multitask_loss, rnnt_loss, att_loss
from .models import ModelConfig, ModelParams, backward_all, encode, forward_all, grad_check
from .search import DECODERS, DecodeResult, decode
from .training import SyntheticTaskSpec, evaluate, gen_dataset, run_two_stage, train, two_stage_weights

__version__ = "0.1.0"
