"""Riemannian statistics network for two-person skeleton interactions."""

from .autodiff import NumericError
from .data import DatasetSplit, SkeletonSequence, generate_synthetic, normalize
from .model import GeomNetConfig, forward, init_params, loss_and_backward
from .spd import AIRM, MetricConfig
from .topology import ConfigError, SkeletonTopology, builtin_topology, toy_topology

__version__ = "0.1.0"
