"""Linear-quadratic mean-variance Stackelberg games under asymmetric partial
information, with Poisson jumps in the state and the observations."""
from ._version import __version__
from .errors import MVGameError
from .model import ProblemSpec, TimeGrid, load_problem, parse_problem, toy_spec, validate_spec
from .game import solve_follower, solve_leader
from .sde import sample_noise, simulate_truth

__all__ = ["MVGameError", "ProblemSpec", "TimeGrid", "load_problem", "parse_problem",
           "toy_spec", "validate_spec", "solve_follower", "solve_leader", "sample_noise",
           "simulate_truth", "__version__"]
