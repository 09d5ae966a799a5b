"""Named desk-scale recipes: the default skewed task and the training settings
used for the federated, centralized and client-adaptive runs."""

from __future__ import annotations

from dataclasses import replace

from .data import SyntheticTaskSpec
from .federation import TrainingConfig

DEFAULT_TASK = SyntheticTaskSpec()

# federated clients: momentum SGD at lr 0.2, 20 epochs, annealing after epoch 10
FEDAVG = TrainingConfig(num_classes=DEFAULT_TASK.C)

# pooled single-stream training: lr 0.1 with batch 256, same epochs and annealing
CENTRALIZED = replace(FEDAVG, local_lr=0.1, batch_size=256)

# client-adaptive training: slower model updates while the transforms settle
CAFT = replace(FEDAVG, mode="caft", local_lr=0.05)

SWEEP_ROUNDS = (10, 20, 30, 40)


def task(seed: int) -> SyntheticTaskSpec:
    return replace(DEFAULT_TASK, seed=seed)


def caft_pt(checkpoint, base: TrainingConfig = CAFT) -> TrainingConfig:
    """CAFT warm-started from a FedAvg checkpoint: 10 epochs, annealing after epoch 3."""
    return replace(base, mode="caft_pt", init_checkpoint=str(checkpoint), pt_epochs=10, pt_anneal_start=3)
