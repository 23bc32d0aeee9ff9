"""miniseq: desk-scale seq2seq training with emulated FP16 mixed precision."""

__version__ = "0.1.0"
