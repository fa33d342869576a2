"""Desk-scale pre-training workbench: MLM encoders, de-noising seq2seq models,
encoder extraction, two-stage warm-started training, and compute accounting."""

__version__ = "0.1.0"
