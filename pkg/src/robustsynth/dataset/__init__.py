"""Training-set construction from judged trajectory trees."""

from .minhash import MinHasher, exact_jaccard, greedy_representatives, shingles, tokenize
from .pipeline import (DatasetSplit, MixtureConfig, PipelineConfig, PipelineResult, StepView, TrainingInstance,
                       TrajectoryView, balance_tasks, build_instances, canonical_target, dedup, manifest_path,
                       mask_steps, median_cap, mix, parse_jsonl, posterior_filter, run_pipeline, serialize,
                       split_reflection, trajectories_from_tree)

__all__ = [
    "MinHasher", "exact_jaccard", "greedy_representatives", "shingles", "tokenize", "DatasetSplit",
    "MixtureConfig", "PipelineConfig", "PipelineResult", "StepView", "TrainingInstance", "TrajectoryView",
    "balance_tasks", "build_instances", "canonical_target", "dedup", "manifest_path", "mask_steps",
    "median_cap", "mix", "parse_jsonl", "posterior_filter", "run_pipeline", "serialize", "split_reflection",
    "trajectories_from_tree",
]
