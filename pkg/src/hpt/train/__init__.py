from .evaluate import (EvalReport, ExpertPolicy, HptPolicy, RolloutResult, batch_loss, dataset_loss,
                       eval_validation_loss, rollout)
from .loop import (RunResult, TrainConfig, TransferConfig, config_hash, pretrain, train_loss, transfer,
                   write_trace)
from .optim import OptimizerState, adamw_step, clip_grad_norm, cosine_lr
from .experiments import SCALING_COLUMNS, compare_baselines, run_scaling_experiment, write_scaling_csv
