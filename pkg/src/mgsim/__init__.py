"""Deterministic simulator and offline stability analyzer for DC microgrids.

Each distributed generation unit (DGU) regulates its output voltage with a
decentralised L1 adaptive primary controller; a distributed consensus layer
restores the bus voltage and shares load current. Submodules:

- ``netmodel``: converter small-signal models, CPL linearisation, bus algebra.
- ``l1ac``: the L1 adaptive controller (predictor, adaptive law, filter).
- ``stability``: L1-norm condition, Lyapunov and impedance analyses.
- ``consensus``: dynamic consensus estimators and secondary PI corrections.
- ``sim``: fixed-step deterministic scenario integration and metrics.
- ``cli``: scenario-driven command line front end.
"""

__version__ = "0.1.0"
