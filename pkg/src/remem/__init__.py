"""remem: rewrite the rules stored in small convolutional generators.

A conv layer is treated as a linear associative memory mapping input
feature keys to output feature patches.  The package measures key
statistics, derives constrained update directions, and applies exact or
optimized low-rank weight edits, with planted-rule fixtures providing
analytic ground truth for every claim.
"""

__version__ = "0.1.0"
