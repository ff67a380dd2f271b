"""Budgeted lead-molecule optimization toolkit.

A SMILES molecule layer, circular fingerprints and functional-group
features, budgeted property oracles, a static exemplar memory, an evolving
skill memory, a multi-turn reward environment with plateau-triggered memory
injection, credit-assignment numerics, and an evaluation harness.
"""

__version__ = "0.1.0"
