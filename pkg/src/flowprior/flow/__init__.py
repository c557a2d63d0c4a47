"""Invertible generator built from actnorm, mixing and affine coupling layers."""
from .checkpoint import (
    CheckpointDimensionError,
    CheckpointError,
    CheckpointHeaderError,
    CheckpointTruncatedError,
    load,
    save,
)
from .layers import ActNorm, Coupling, Mixing
from .stack import FlowNumericalError, FlowPass, FlowStack


def forward(G: FlowStack, z):
    return G.forward(z)


def inverse(G: FlowStack, x):
    return G.inverse(x)


def log_det(G: FlowStack, z):
    return G.log_det(z)


def log_prob(G: FlowStack, x):
    return G.log_prob(x)


def grad_data_fit(G: FlowStack, z, A, y, gamma=0.0):
    return G.grad_data_fit(z, A, y, gamma)


def jacobian_singular_values(G: FlowStack, z):
    return G.jacobian_singular_values(z)


__all__ = [
    "ActNorm",
    "Coupling",
    "Mixing",
    "FlowStack",
    "FlowPass",
    "FlowNumericalError",
    "CheckpointError",
    "CheckpointHeaderError",
    "CheckpointTruncatedError",
    "CheckpointDimensionError",
    "forward",
    "inverse",
    "log_det",
    "log_prob",
    "grad_data_fit",
    "jacobian_singular_values",
    "save",
    "load",
]
