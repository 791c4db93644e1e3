from .models import (
    PointCloud,
    SensorModel,
    RangeImage,
    Pose,
    OverlapTable,
    TrainingTuple,
    StreamState,
    DatasetManifest,
    ScanEntry,
    SyntheticWorld,
    ProgressUpdate,
    TrainingResult,
    EvalReport,
    window_for,
)
from .exceptions import (
    SeqPlaceError,
    ConfigError,
    EquivarianceError,
    DataError,
    ShapeError,
    SamplingError,
    TrainingError,
    TrainingCancelled,
    SelfTestFailure,
)
from .config import RunConfig, ModelConfig, TrainConfig, DataConfig, EvalConfig, OverlapConfig
from .rangeproj import project, yaw_rotate, column_shift, reproject
from .overlap import overlap, build_pair_labels, sample_training_tuple, PairLabeller
from .model import SeqOT, gem_pool, param_count
from .training import (
    triplet_loss_sub,
    triplet_loss_global,
    adam_step,
    OptimizerState,
    SubDescriptorCache,
    train_phase1,
    train_phase2,
)
from .retrieval import (
    DescriptorIndex,
    build_index,
    query_top_k,
    average_recall_at_n,
    precision_recall_curve,
    evaluate,
)
from .datasets import (
    load_cloud,
    load_poses,
    generate_world,
    simulate_scan,
    make_benchmark,
    ScanLoader,
)

__all__ = [
    'PointCloud',
    'SensorModel',
    'RangeImage',
    'Pose',
    'OverlapTable',
    'TrainingTuple',
    'StreamState',
    'DatasetManifest',
    'ScanEntry',
    'SyntheticWorld',
    'ProgressUpdate',
    'TrainingResult',
    'EvalReport',
    'window_for',
    'SeqPlaceError',
    'ConfigError',
    'EquivarianceError',
    'DataError',
    'ShapeError',
    'SamplingError',
    'TrainingError',
    'TrainingCancelled',
    'SelfTestFailure',
    'RunConfig',
    'ModelConfig',
    'TrainConfig',
    'DataConfig',
    'EvalConfig',
    'OverlapConfig',
    'project',
    'yaw_rotate',
    'column_shift',
    'reproject',
    'overlap',
    'build_pair_labels',
    'sample_training_tuple',
    'PairLabeller',
    'SeqOT',
    'gem_pool',
    'param_count',
    'triplet_loss_sub',
    'triplet_loss_global',
    'adam_step',
    'OptimizerState',
    'SubDescriptorCache',
    'train_phase1',
    'train_phase2',
    'DescriptorIndex',
    'build_index',
    'query_top_k',
    'average_recall_at_n',
    'precision_recall_curve',
    'evaluate',
    'load_cloud',
    'load_poses',
    'generate_world',
    'simulate_scan',
    'make_benchmark',
    'ScanLoader',
]
