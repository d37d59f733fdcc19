"""Hyena long-convolution mixers as drop-in attention replacements in a small
GPT-NeoX-style decoder, plus the training, distillation, evaluation, and
benchmarking machinery around them."""

__version__ = "0.1.0"
