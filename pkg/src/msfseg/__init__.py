"""Few-shot volumetric segmentation with multi-surrogate fusion."""

from .config import ModelConfig, TrainConfig, SMALL_MODEL
from .data import (Corpus, Episode, SupportSequence, SynthConfig, Volume,
                   generate_corpus, generate_volume, load_corpus, load_volume,
                   sample_episode, save_corpus, save_volume)
from .errors import ConfigError, FormatError, InputError, TrainingDiverged
from .metrics import (MetricReport, MetricRow, boundary_f, dice, evaluate_run,
                      jaccard, mean_reports)
from .model import MSFSegNet, QueryPrediction, segmentation_loss, train_episode
from .propagation import (QCPolicy, SupportPool, init_pool, load_pool,
                          propagate_dataset, save_pool, segment_volume,
                          select_supports)
from .training import (AugmentSpec, TrainResult, augment_support,
                       evaluate_episodes, pseudo_nshot, train_model)

__version__ = "0.1.0"
