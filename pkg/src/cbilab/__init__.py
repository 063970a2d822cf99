"""Numerical laboratory for finite-type continuous-state branching processes.

Subpackages:
    mechanism -- branching/immigration mechanism data types and closed forms
    cumulant  -- cumulant ODE flow, moment semigroup, extinction envelopes
    simulate  -- exact and operator-split transition samplers
    coupling  -- explicit couplings of transition and stationary laws
    distance  -- empirical and exact Wasserstein / total-variation distances
    verify    -- scenario runner checking ergodicity bounds end to end
"""

__version__ = "0.1.0"
