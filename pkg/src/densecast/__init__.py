"""densecast: density nowcasts of quarterly GDP growth from monthly panels.

Three nowcasting engines (a two-step dynamic factor model with analytic
Gaussian densities, Bayes by Backprop, and Monte Carlo dropout on a 1D CNN)
plus a rolling-window evaluation harness and reporting tools.
"""

__version__ = "0.1.0"
