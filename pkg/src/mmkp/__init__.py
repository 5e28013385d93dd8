"""Keyphrase generation for posts that pair text with an image.

The text side concatenates the post, words read off the image and entity
names; the image side is a 7x7 grid of region features.  Noisy regions are
down-weighted before fusion, a classifier proposes candidate keyphrases, and a
copy-augmented GRU decoder generates the final ranked list.
"""

from .classifier import Classifier, LabelSet, top_k_predictions
from .config import VARIANTS, RunConfig, load_config
from .data import (MatchingPair, MultiModalSample, Vocabulary, build_vocabulary, concat_input, load_dataset,
                   load_matching, replicate_one2one, save_dataset, save_matching)
from .encoders import ImageEncoder, TextEncoder
from .errors import (ConfigError, EmptyCorpus, EmptyInput, MKPError, NoTarget, NumericError, ParseError,
                     ShapeError, StageOrderError)
from .evaluation import MetricsReport, evaluate, f1_at_k, map_at_5
from .generator import Generator, beam_search, copy_distribution, mix_distributions
from .model import KeyphraseModel, ModelConfig, loss_cla, loss_gen, loss_irtm, loss_itm
from .noise_filter import NoiseFilter, filter_image, gt_correlation_scores
from .synthetic import SyntheticSpec, generate_synthetic_corpus
from .training import Checkpoint, TrainConfig, grad_check, predict_keyphrases, train_stage1, train_stage2

__version__ = "0.1.0"
