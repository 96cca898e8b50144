from .checkpoint import load_checkpoint, save_checkpoint
from .model import (
    Belief,
    BeliefTracker,
    ContractError,
    FreeEnergy,
    LatentState,
    ObservationDist,
    RolloutSample,
    TrainingDivergenceError,
    WorldModel,
    gaussian_entropy,
    kl_diag_gaussian,
)
from .networks import PRESETS, ModelConfig
from .train import TrainConfig, train
