"""Federated meta-learning laboratory.

Softmax-regression learners trained across simulated edge nodes with
meta-gradient updates (FedML), a FedAvg baseline, a distributionally
robust variant, fast target-node adaptation, and numerical verification
of the convergence analysis.
"""

from .model import LossSpec, Params, Sample, grad_theta, grad_x, hessian_vec, loss
from .data import (
    Federation,
    NodeData,
    SizeSpec,
    gen_synthetic,
    load_federation,
    load_mnist_idx,
    partition_mnist,
    save_federation,
    split_sources_targets,
)
from .federation import (
    DivergenceError,
    FedConfig,
    RoundLog,
    aggregate,
    evaluate,
    fast_adapt,
    init_params,
    inner_update,
    local_round,
    meta_gradient,
    run_fedavg,
    run_fedml,
)
from .robust import (
    RobustConfig,
    adversarial_ascent,
    fgsm_attack,
    generate_adversarial_set,
    robust_local_round,
    run_robust_fedml,
    transport_cost,
)

__version__ = "0.1.0"
