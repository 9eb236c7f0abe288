"""Hierarchical manager-analyst trading engine with dual-level risk control.

Submodules map to the system's components: ``data_ingest`` (file-based
market data), ``memory`` (scored retrieval), ``llm_gateway`` (validated
completions with a scripted mock), ``agents`` (the manager-analyst tree),
``risk_control`` (CVaR trigger and over-episode belief updates),
``portfolio`` (constrained mean-variance allocation), ``backtest`` (the
deterministic train/test harness) and ``cli`` (operator entry point).
"""

__version__ = "0.1.0"
