"""Learned refiner: equivariant step networks trained progressively."""

from .features import apply_update, build_step_input, row_width
from .network import CC, H36M_PLAN, SKI_PLAN, DenseLayer, StepNetwork, selu
from .optimizer import (NeuralOptimizer, TrainConfig, TrainingItem, advance, infer,
                        load_model, save_model, scene_items, train_optimizer,
                        train_step_network)
