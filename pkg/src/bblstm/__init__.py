"""Bivariate-Beta gated LSTMs with reparameterised Gamma gates.

Modules: ``special`` (incomplete gamma and friends), ``stochastic``
(random streams, Gamma/Gumbel sampling, pathwise gradients), ``tape``
(reverse-mode autodiff), ``cells`` (all gate variants), ``objectives``
(losses, Gamma KL, priors, Adam), ``data``, ``model``, ``training``,
``diagnostics``, ``checks`` and ``cli``.
"""

__version__ = "0.1.0"
