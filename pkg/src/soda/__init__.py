"""SODA: an ad-analysis workbench.

Predicts an ad creative's CTR class from tabular, text, and image inputs
with a three-branch transformer fusion model, explains image predictions
with attention-rollout heatmaps, and runs an LLM pipeline that extracts
standardized per-ad insights and aggregates them into brand, comparative,
and persona reports.
"""

__version__ = "0.1.0"
