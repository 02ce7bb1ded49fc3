"""Rigid-body reconstruction of protein dimers from inter-chain contacts.

Modules:
    geometry: rigid transforms, poses and Kabsch superposition.
    pdb_io: PDB parsing and writing.
    restraints: contact extraction, contact files and the contact energy.
    environment: the docking MDP and a one-dimensional toy MDP.
    dqn_agent: a numpy deep Q-network and its self-play trainer.
    baselines: gradient descent, Monte Carlo and simulated annealing.
    metrics: TM-score, RMSD, fnat, interface and ligand RMSD.
    harness: run settings, manifests, benchmarks and report tables.
"""

__version__ = "0.1.0"
