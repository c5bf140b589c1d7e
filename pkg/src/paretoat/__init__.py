"""Integrated spatial adversarial attacks and Pareto adversarial training.

Subpackages:
    backend   -- classifier contract: forward, losses, gradients, train steps
    grids     -- differentiable warping: base/affine/integrated grids, sampling
    attacks   -- PGD, flow, rotation-translation and integrated spatial attacks
    qp        -- loss moments and the simplex-constrained quadratic program
    training  -- the training strategies, including the bi-level Pareto loop
    analysis  -- robustness scores, saliency maps, skewness, loss landscapes
    data      -- dataset ingestion (MNIST, CIFAR-10)
    cli       -- command-line entry points
"""

__version__ = "0.1.0"
