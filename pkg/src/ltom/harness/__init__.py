"""Training, rollout and evaluation of the five policy variants."""

from .data import Normalizer, TrainingSet, build_training_set, chunk, history
from .evaluate import SUMMARY_COLUMNS, Cell, SuiteReport, collapse_probe, evaluate_suite, summarize
from .model import ACTION_DIM, PolicyModel, RestrictionMaps, effective_weights
from .rollout import Controller, MessageAccountingError, RolloutRecord, expected_messages, rollout
from .train import (
    CURVE_COLUMNS,
    Checkpoint,
    Trainer,
    TrainingAborted,
    as_variant,
    load_checkpoint,
    read_curve,
    train,
    write_curve,
)
