"""Free-trial adopter selection: simulated recommender, tree-structured
REINFORCE agent, static baselines and experiment harness."""

__version__ = "0.1.0"
