"""Region-level labeling budgets for semi-supervised crowd counting.

Synthetic scenes with a vertical density gradient and horizontal zones, a
small exact-gradient density counter, strip selection strategies (random /
max-mass / density-vector clustering), and training-time affinity propagation
from unlabeled into labeled regions.
"""

from .cap import (
    AffinityMatrix,
    CapConfig,
    cap_backward,
    cap_forward,
    cap_normalize,
    cap_propagate,
    cap_similarity,
)
from .counternet import (
    CounterParams,
    FeatureMap,
    TrainConfig,
    backward,
    forward,
    infer,
    init_params,
    train,
)
from .densitymap import (
    CountMetrics,
    DensityMap,
    KernelConfig,
    evaluate,
    generate_density_map,
    masked_euclidean_loss,
)
from .gmm import ClusterAssignment, EmConfig, GmmModel, em_fit, log_likelihood, posterior
from .harness import (
    BudgetConfig,
    ExperimentReport,
    PipelineResult,
    replay_run,
    run_ablation,
    run_pipeline,
)
from .regionselect import (
    LabelMask,
    MultiLevelDensityVector,
    StripPartition,
    multilevel_density_vector,
    partition_strips,
    select_max,
    select_mdc,
    select_random,
    select_ratio_rect,
)
from .synthcrowd import (
    CrowdScene,
    Dataset,
    SceneSpec,
    generate_dataset,
    generate_scene,
    load_dataset,
    save_dataset,
)

__version__ = "0.1.0"
