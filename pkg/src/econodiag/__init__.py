"""Econophysics diagnostics: DFA, log-periodic crash fits, Zipf ranking, comovement."""

__version__ = "0.1.0"
