"""Differentiable odd-even sorting networks, group-ordering losses, and a
desk-scale self-supervised embedding trainer with k-NN / linear-probe
evaluation."""

from . import batchpipe, dataio, diffgrad, evals, losses, model, sortcore
from .sortcore import diff_sort, hard_sort, sigmoid_f, soft_swap
from .losses import (
    GroCoParams,
    InfoNCEParams,
    TripletParams,
    groco_closed_form_1v1,
    groco_loss,
    infonce_loss,
    triplet_loss,
)

__version__ = "0.1.0"

__all__ = [
    "batchpipe",
    "dataio",
    "diffgrad",
    "evals",
    "losses",
    "model",
    "sortcore",
    "diff_sort",
    "hard_sort",
    "sigmoid_f",
    "soft_swap",
    "GroCoParams",
    "InfoNCEParams",
    "TripletParams",
    "groco_closed_form_1v1",
    "groco_loss",
    "infonce_loss",
    "triplet_loss",
    "__version__",
]
