"""Map word embeddings from a source language into a target language's
vector space using only monolingual data, via adversarial training."""

__version__ = "0.1.0"
