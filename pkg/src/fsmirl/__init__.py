"""Causal-attention sampling and HSIC reweighting for OOD node classification."""
from .graph import Graph, SplitAssignment, delete_edges, label_homogeneity, load_graph, neighbors
from .hsic import (hsic_biased, hsic_scaled, optimize_weights, total_dependence,
                   weighted_hsic)
from .kernels import KernelSpec, center, discrete_kde, gram, kernel_eval, median_heuristic
from .model import TrainConfig, evaluate, forward, init_params, loss_and_grads, train
from .sampler import (AttentionProjection, attention_weight, causal_weight, sample_neighbors,
                      sampling_profile, signature)

__version__ = "0.1.0"
