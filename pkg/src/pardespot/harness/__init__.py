from pardespot.harness.belief import BeliefDegeneracyError, belief_histogram, belief_update, systematic_resample
from pardespot.harness.episode import VARIANTS, EpisodeRecord, EpisodeSettings, normalized_nodes, plan, run_episode, variant_config
from pardespot.harness.experiment import (
    ExperimentConfig,
    ExperimentReport,
    run_experiment,
    run_planning_benchmark,
    run_sweep,
)
from pardespot.harness.results import emit_results

__all__ = [
    "BeliefDegeneracyError", "belief_histogram", "belief_update", "normalized_nodes", "systematic_resample", "VARIANTS", "EpisodeRecord",
    "EpisodeSettings", "plan", "run_episode", "variant_config", "ExperimentConfig", "ExperimentReport",
    "run_experiment", "run_planning_benchmark", "run_sweep", "emit_results",
]
