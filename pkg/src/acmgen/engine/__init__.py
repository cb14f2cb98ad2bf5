"""Continual-learning engine: formatting, losses, replay and the task loop."""

from .formatting import (FormattedExample, TaskDescriptor, finetune_window, format_all,
                         format_example, gen_window, parse_generated, prompt_ids)
from .generation import (ReplayBuffer, generate_pseudo, greedy_decode, sample_sequences,
                         split_budget, top_k_choice)
from .losses import loss_finetune, loss_gen, loss_train, weighted_loss
from .learner import (METHODS, ContinualRun, EngineError, Hyper, RunState, TaskData,
                      decision_stage, interleave, load_tasks, make_batches, run_method,
                      train_stage)
