"""Actor-critic learning: networks, PPO, training loop, checkpoints."""
from .agent import ActorCritic, CriticOutput, RunningNorm
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .ppo import PPOConfig, RolloutBatch, gae
from .train import TrainConfig, Trainer

__all__ = ["ActorCritic", "CriticOutput", "RunningNorm", "CheckpointError", "load_checkpoint",
           "save_checkpoint", "PPOConfig", "RolloutBatch", "gae", "TrainConfig", "Trainer"]
