from .dataset import (VALID_PAIRS, CorruptDataError, DatasetSplit, check_pair,
                      compute_cons_target, generate_split, generate_trajectories, law_for,
                      read_dataset, write_dataset)
from .solvers import (PdeSpec, SolverInstability, sample_ic_cac2d, sample_ic_schrodinger,
                      sample_ic_te2d, solve_cac2d, solve_schrodinger, solve_te2d, te2d_field)

__all__ = [
    "VALID_PAIRS", "CorruptDataError", "DatasetSplit", "PdeSpec", "SolverInstability",
    "check_pair", "compute_cons_target", "generate_split", "generate_trajectories", "law_for",
    "read_dataset", "sample_ic_cac2d", "sample_ic_schrodinger", "sample_ic_te2d",
    "solve_cac2d", "solve_schrodinger", "solve_te2d", "te2d_field", "write_dataset",
]
