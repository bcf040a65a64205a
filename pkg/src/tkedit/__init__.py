"""Temporal knowledge editing workbench.

Builds single/multiple/extending edit benchmarks from timestamped fact
chains, edits a linear associative memory with fine-tuning, rank-one and
batch editors (optionally in multi-edit + time-objective mode) and scores
the results on current/historical, explicit/relative questions.
"""

__version__ = "0.1.0"
