"""gidp: point-cloud place recognition with contrastive pretraining and
re-ranked descriptor retrieval.

Kept import-light on purpose: the CLI can parse arguments and reach a remote
server without loading the numeric stack.
"""

__version__ = "0.1.0"
