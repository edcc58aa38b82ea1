"""Operator learning for controlled dynamical systems from variable-length histories."""
from .numerics import ParameterVector, Layout, load_parameters, save_parameters
from .dynamics import TimeGrid, Trajectory, GRFSpec, rk4_integrate, lorenz_rhs, pendulum_rhs
from .datagen import Dataset, Normalizer, build_quartets, fit_normalizer, make_rng
from .model import ModelConfig, config_for, init_parameters, predict, Checkpoint

__version__ = "0.1.0"
