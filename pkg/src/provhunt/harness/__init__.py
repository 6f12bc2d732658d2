from .benign import BenignProfile, gen_benign
from .mix import attack_seqs, ground_truth, interleave, write_ground_truth
from .scenario import (
    LabeledStream,
    ScenarioError,
    ScenarioScript,
    UnknownScenario,
    compile_script,
    gen_scenario,
    load_scenario,
    scenario_names,
)

__all__ = [
    "BenignProfile",
    "LabeledStream",
    "ScenarioError",
    "ScenarioScript",
    "UnknownScenario",
    "attack_seqs",
    "compile_script",
    "gen_benign",
    "gen_scenario",
    "ground_truth",
    "interleave",
    "load_scenario",
    "scenario_names",
    "write_ground_truth",
]
