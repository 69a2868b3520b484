from enum import Enum
from typing import NewType

import numpy as np

# A flat, real-valued model parameter vector x ∈ R^d. Every model defines its own (de)flattening layout.
ParamVector = NewType('ParamVector', np.ndarray)


class Algorithm(str, Enum):
    """The federated algorithms known to the laboratory.

    FedNL is only ever accounted for (communication and memory), never executed.
    """
    FEDSGD = 'fedsgd'
    FEDAVG = 'fedavg'
    SCAFFOLD = 'scaffold'
    FEDDANE = 'feddane'
    FEDSSO = 'fedsso'
    FEDNL = 'fednl'

    @property
    def display_name(self) -> str:
        return {
            Algorithm.FEDSGD: 'FedSGD',
            Algorithm.FEDAVG: 'FedAvg',
            Algorithm.SCAFFOLD: 'Scaffold',
            Algorithm.FEDDANE: 'FedDANE',
            Algorithm.FEDSSO: 'FedSSO',
            Algorithm.FEDNL: 'FedNL',
        }[self]


class Schedule(str, Enum):
    CONSTANT = 'constant'
    THEORY_CONVEX = 'theory_convex'
    THEORY_NONCONVEX = 'theory_nonconvex'


class InverseMode(str, Enum):
    """How the server applies the inverse of the approximate Hessian."""
    SPD_SOLVE = 'spd_solve'
    DUAL_INVERSE = 'dual_inverse'
