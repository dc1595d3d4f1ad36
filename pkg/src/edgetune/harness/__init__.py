"""Training, task generation, baselines and reporting."""
