"""Pricing of American-type options by fitting a nonnegative combination of
harmonic basis functions that dominates the payoff everywhere, via a
cutting-plane method for the underlying semi-infinite linear program."""

__version__ = "0.1.0"
