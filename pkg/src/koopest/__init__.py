"""Reduced-order linear estimation of nonlinear systems from trajectory data.

The pipeline: lift measured states through a polynomial observable dictionary,
fit a reduced linear one-step operator by least squares on snapshot pairs,
then train a deterministic policy-gradient agent whose per-step action corrects
the residual error of the linear model. A fitted estimator can be carried to a
diffeomorphic coordinate change by two small least-squares maps instead of
retraining from scratch.
"""

__version__ = "0.1.0"
