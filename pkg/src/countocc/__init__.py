"""Amodal counting toolkit: occlusion synthesis, feature reconstruction, distillation and attention consistency."""

__version__ = "0.1.0"
