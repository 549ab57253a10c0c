"""
Utils module for the task-specific adapter engine
"""

from .tensor import (
    Tensor,
    GradTape,
    ShapeError,
    TapeError,
    LabelError,
    ZeroNormError,
    OptimizerError,
    AdadeltaState,
    adadelta_step,
    conv2d,
    softmax_cross_entropy
)

from .backbone import (
    BackboneSpec,
    BackboneWeights,
    PretrainConfig,
    RESNET_S,
    RESNET18_REPLICA,
    BACKBONE_PRESETS,
    init_weights,
    forward_features,
    pretrain_mdl,
    count_parameters
)

from .weights_file import (
    WeightsFormatError,
    export_weights,
    import_weights
)

from .adapters import (
    AdapterConfig,
    AdapterConfigError,
    TaskModel,
    attach,
    parse_code,
    adapter_parameter_count
)

from .classifiers import (
    ClassifierError,
    ncc_logits,
    md_logits,
    knn_predict,
    train_linear_head
)

from .adaptation import (
    AdaptConfig,
    AdaptTrace,
    AdaptationError,
    adapt,
    predict,
    evaluate_episode,
    finetune_baseline
)

from .episodes import (
    Dataset,
    Episode,
    EpisodeError,
    SyntheticDomainSpec,
    gen_synthetic_domains,
    default_domain_suite,
    sample_episode,
    make_channel_shift_episode
)

from .idx_loader import (
    IdxFormatError,
    load_idx,
    fetch_idx_dataset
)

from .statistics import (
    ci95,
    aggregate_rank,
    group_averages
)

from .config import (
    RunConfig,
    ConfigError,
    load_run_config
)

from .harness import (
    HarnessError,
    RunReport,
    run_experiment,
    ablation_grid
)

__all__ = [
    'Tensor',
    'GradTape',
    'ShapeError',
    'TapeError',
    'LabelError',
    'ZeroNormError',
    'OptimizerError',
    'AdadeltaState',
    'adadelta_step',
    'conv2d',
    'softmax_cross_entropy',
    'BackboneSpec',
    'BackboneWeights',
    'PretrainConfig',
    'RESNET_S',
    'RESNET18_REPLICA',
    'BACKBONE_PRESETS',
    'init_weights',
    'forward_features',
    'pretrain_mdl',
    'count_parameters',
    'WeightsFormatError',
    'export_weights',
    'import_weights',
    'AdapterConfig',
    'AdapterConfigError',
    'TaskModel',
    'attach',
    'parse_code',
    'adapter_parameter_count',
    'ClassifierError',
    'ncc_logits',
    'md_logits',
    'knn_predict',
    'train_linear_head',
    'AdaptConfig',
    'AdaptTrace',
    'AdaptationError',
    'adapt',
    'predict',
    'evaluate_episode',
    'finetune_baseline',
    'Dataset',
    'Episode',
    'EpisodeError',
    'SyntheticDomainSpec',
    'gen_synthetic_domains',
    'default_domain_suite',
    'sample_episode',
    'make_channel_shift_episode',
    'IdxFormatError',
    'load_idx',
    'fetch_idx_dataset',
    'ci95',
    'aggregate_rank',
    'group_averages',
    'RunConfig',
    'ConfigError',
    'load_run_config',
    'HarnessError',
    'RunReport',
    'run_experiment',
    'ablation_grid'
]
