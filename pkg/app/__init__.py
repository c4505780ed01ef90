"""Fundus Transfer - pretrain on a feature-similar source task, fine-tune on a data-poor target task."""

__version__ = "1.0.0"
