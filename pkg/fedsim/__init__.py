"""The fedsim package is a deterministic federated optimisation laboratory. It implements FedSSO, a server-side
quasi-Newton method driven by the averaged ("lighthouse") gradient of each round, next to the FedSGD, FedAvg,
Scaffold and FedDANE baselines, together with the communication accounting and the oracles that check its
guarantees.
"""
