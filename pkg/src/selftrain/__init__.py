"""Training lab for studying the teacher-forcing / inference gap.

A tiny decoder-only transformer is trained on exactly-checkable synthetic
tasks under four regimes: plain maximum likelihood, offline batch-mixed
continuations, offline correction labels, and online scheduled sampling.
"""

import torch as _torch

# The model is small enough that intra-op threading only adds dispatch
# overhead, and a single thread keeps kernel reduction order independent of
# the worker fan-out used by build/eval phases.
_torch.set_num_threads(1)

from .corpus import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    REF_BEGIN_ID,
    REF_END_ID,
    SEP_ID,
    Dataset,
    Example,
    Vocab,
    gen_addition_task,
    gen_copy_task,
    gen_extract_task,
    oracle_for,
    read_dataset,
    write_dataset,
)
from .correction import RacExample, RacTemplate, build_dr, build_rac_prompt, gen_rac_labels
from .evaluate import (
    EvalReport,
    embedding_distance_distribution,
    evaluate_checkpoint,
    exact_match_rate,
    rouge_f1,
    win_rate_vs_reference,
)
from .losses import BatchLoss, bash_loss, combined_step_loss, rac_loss, sft_loss
from .mixing import MixConfig, MixedExample, bench_scs_vs_bash, build_ds, mix_continuation
from .model import (
    ModelConfig,
    ModelParams,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grads,
    save_checkpoint,
)
from .sampler import GenerationConfig, GenResult, generate, next_token, teacher_forced_argmax
from .trainer import (
    OptimizerState,
    RunRecord,
    TrainConfig,
    optimizer_step,
    run_training,
    train_bash,
    train_rac,
    train_scs_online,
    train_sft,
)

__version__ = "0.1.0"
