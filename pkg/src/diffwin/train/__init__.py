"""Toy tasks, optimizer and training loop."""

from .data import TaskBatch, gen_char_lm, gen_copy, gen_toy_sva
from .loop import TrainConfig, TrainResult, average_checkpoints, evaluate, train_loop
from .optim import AdamState, adam_step, inverse_sqrt_lr
from .tasks import CharLMTask, CopyTask, SvaTask, make_task

__all__ = [
    "AdamState",
    "CharLMTask",
    "CopyTask",
    "SvaTask",
    "TaskBatch",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "average_checkpoints",
    "evaluate",
    "gen_char_lm",
    "gen_copy",
    "gen_toy_sva",
    "inverse_sqrt_lr",
    "make_task",
    "train_loop",
]
