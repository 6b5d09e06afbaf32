"""Clustered training against the baselines on a label-shard federation.

Each of fifty clients holds three of ten classes. Runs LCFL, IFCA, FedAvg
and local-only training for two seeds and prints a mean±std accuracy table.
Artifacts go to runs/demo-femnist/.
"""
from lcfl.harness import runner
from lcfl.harness.config import load_config

cfgs = load_config(profile="femnist-mini", output_dir="runs/demo-femnist", seeds=[0, 1])
print(runner.compare(cfgs, [5, 10, 20, 30]))
