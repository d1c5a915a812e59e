"""Deep-RL UAV access point placement over synthetic urban SINR fields.

Subpackages cover the pipeline end to end: procedural city rasters
(:mod:`uavplace.gridmap`), the deterministic channel model
(:mod:`uavplace.propagation`), the grid PO-MDP (:mod:`uavplace.env`), the
dueling Q-network with hand-derived gradients (:mod:`uavplace.qnet`),
training (:mod:`uavplace.rl`), reference policies (:mod:`uavplace.baselines`),
evaluation metrics (:mod:`uavplace.evaluate`) and rendering
(:mod:`uavplace.render`). The `uavplace` console script ties them together.
"""

__version__ = "0.1.0"
