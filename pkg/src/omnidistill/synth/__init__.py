"""Desk-scale synthetic world, toy detector and experiment runner."""

from .model import ModelConfig, ToyModel, ToyTrainer, train_toy
from .world import WorldConfig, gen_world

__all__ = ["WorldConfig", "gen_world", "ModelConfig", "ToyModel", "ToyTrainer", "train_toy"]
