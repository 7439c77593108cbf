"""Character-level BiLSTM property prediction from SMILES (toxicity, solvation energy)."""

__version__ = "0.1.0"
