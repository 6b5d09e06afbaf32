"""Config loading, experiment runs and the command line."""
from .config import ExperimentConfig, load_config, parse_document, parse_verify
from .runner import compare, gen_data, inspect_matrix, run, verify

__all__ = ["ExperimentConfig", "load_config", "parse_document", "parse_verify", "run", "compare", "verify",
           "gen_data", "inspect_matrix"]
