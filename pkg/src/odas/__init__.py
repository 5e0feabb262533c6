"""Online detection of action start over feature streams.

Training (adaptive sampling, temporal consistency, GAN hard negatives),
streaming detection, and point-level AP evaluation, all on precomputed
per-window feature vectors.
"""

from .core import (ASGroundTruth, ASPrediction, ClassCounts, ConfigError,
                   DataError, EvalConfig, EvalReport, ModelConfig, OdasError,
                   ROLE_BACKGROUND, ROLE_FOLLOW_UP, ROLE_INSIDE, ROLE_START,
                   ShapeError, StartPair, StateError, StreamError,
                   TrainingDivergedError, WindowSample)
from .dataset import (FeatureStream, Instance, SynthConfig, VideoAnnotation,
                      build_corpus_dataset, build_start_pairs,
                      build_window_dataset, ground_truths, load_annotations,
                      load_corpus, read_feature_stream, save_annotations,
                      synth_corpus, write_corpus, write_feature_stream)
from .detector import (DEFAULT_THRESHOLD_GRID, DetectorState, detect_stream,
                       grid_search_threshold, load_predictions, model_scorer,
                       random_guess, random_scorer, save_predictions, step,
                       stream_candidates)
from .evaluation import (average_precision, evaluate, match_predictions,
                         pr_curve_rows, rank_predictions, save_curves)
from .nn import (BatchNormLayer, DenseLayer, Discriminator, Generator,
                 check_gradients, disc_forward, gen_forward,
                 load_discriminator, load_generator, save_discriminator,
                 save_generator, sgd_step, softmax)
from .training import (LossRow, Methods, TrainConfig, adaptive_sample_batch,
                       classification_loss, discriminator_loss,
                       fake_sample_loss, make_models, matching_loss, pretrain,
                       real_sample_loss, run_gradient_checks, run_training,
                       similarity_loss, split_pools, train_gan,
                       uniform_sample_batch, write_training_log)

__version__ = "0.1.0"
