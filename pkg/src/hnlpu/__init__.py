"""Simulator for a hardwired-neuron language processing unit.

Modules: numerics (FP4 / activation formats), mecore (hardwired neurons),
golden (reference MoE transformer), fabric (4x4 chip collectives),
dataflow (distributed mapping), pipeline, costmodel and cli.
"""

__version__ = "0.1.0"
