"""Desk-scale reproduction of load-balanced, overlap-friendly sequence-model training."""

from .collectives import CollectiveError, LinkParams, Mode, World
from .embedding import PrioritizedEmbedding, ShardedEmbedding, SynchronizedEmbedding
from .jagged import JaggedTensor, KeyedJaggedTensor, Layout
from .partition import fbs_partition, vbs_partition
from .pipeline import Pipeline, PipelineConfig, ToyModel, run
from .sim import CostModel, MetricRecord, Timeline
from .workload import Batch, Sample, Workload, WorkloadSpec, generate

__version__ = "0.1.0"

__all__ = [
    "Batch", "CollectiveError", "CostModel", "JaggedTensor", "KeyedJaggedTensor", "Layout", "LinkParams",
    "MetricRecord", "Mode", "Pipeline", "PipelineConfig", "PrioritizedEmbedding", "Sample", "ShardedEmbedding",
    "SynchronizedEmbedding", "Timeline", "ToyModel", "Workload", "WorkloadSpec", "World", "fbs_partition",
    "generate", "run", "vbs_partition",
]
