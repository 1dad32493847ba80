"""Desk-scale domain-shift task, training loop, ablation suites and statistics."""
