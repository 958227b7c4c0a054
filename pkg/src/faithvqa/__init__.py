"""Faithful multimodal explanations for a toy VQA world.

Modules: ``toyworld`` (data), ``nncore`` (autodiff helpers, checkpoints),
``vqa``, ``explainer``, ``faithfulness``, ``trainer``, ``limeaudit``,
``metrics``, ``linker``, ``evaluation`` and ``cli``.
"""
__version__ = "0.1.0"
