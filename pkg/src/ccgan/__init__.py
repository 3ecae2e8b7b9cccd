"""Curriculum cycle-consistent adversarial adaptation from several labelled
source domains to one unlabelled target domain."""

__version__ = "0.1.0"
