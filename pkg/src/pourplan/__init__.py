"""Planning toolkit for robot-arm liquid pouring.

Subpackages cover: axisymmetric container geometry and spill tables,
a reduced two-variable fluid model with system identification, a 2D
particle-grid fluid simulator used as training-data generator and
validation oracle, analytic primitive collision checking, serial-chain
kinematics, and a decoupled SQP trajectory optimizer with an internal
active-set QP solver.
"""

__version__ = "0.1.0"
