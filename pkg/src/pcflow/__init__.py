"""Point-cloud flow matching with precomputed superset transport couplings.

A numpy/scipy toolkit covering the full desk-scale pipeline: synthetic
shape sampling, exact and entropic optimal transport, offline superset
coupling precomputation with online coupled subsampling, hybrid
noise-blended couplings, a permutation-equivariant vector-field network
with hand-rolled reverse-mode gradients, conditional-flow-matching
training, Euler ODE sampling, and the evaluation and trajectory
diagnostics that go with them.
"""

from .errors import ConfigError, DataFormatError, NumericError, PcflowError
from .geometry import (
    NormalizationStats,
    PointCloud,
    Superset,
    compute_normalization,
    denormalize,
    generate_shape,
    generate_superset,
    normalize,
    read_xyz,
    sample_noise_superset,
    subsample,
    write_xyz,
)
from .ot import (
    Assignment,
    SinkhornConfig,
    SinkhornResult,
    WgfConfig,
    cost_matrix,
    exact_superset_ot,
    hungarian,
    sinkhorn_divergence,
    squared_distances,
    wasserstein_gradient_flow,
)
from .coupling import (
    HybridConfig,
    SupersetCoupling,
    TrainingPair,
    bench_couplings,
    equivariant_ot_pairs,
    hybrid_perturb,
    independent_pair,
    load_coupling,
    minibatch_ot_pairs,
    precompute_superset_coupling,
    sample_coupled_pair,
    save_coupling,
)
from .metrics import EvalReport, chamfer, coverage, emd, evaluate_sets, jacobian_frobenius, one_nna, trajectory_curvature
from .network import NetConfig, VectorFieldParams, field_fn, forward, init_network, load_checkpoint, save_checkpoint
from .rng import RngState
from .sampling import Trajectory, euler_sample, generate_set
from .training import (
    EncoderConfig,
    PartialObservation,
    TrainConfig,
    TrainState,
    encode_partial,
    fit,
    interpolate,
    make_partial,
    train_step,
)

__version__ = "0.1.0"
