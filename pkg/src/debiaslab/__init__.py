"""debiaslab: two-stage identify-then-emphasize debiasing lab.

Stage one scores every training sample for how much it conflicts with the
dataset's shortcut bias; stage two retrains with the loss rebalanced around
those scores. Plain numpy, deterministic end to end.
"""

__version__ = "0.1.0"
