"""Task-level iterative learning control for simulated rope manipulation.

Layers, bottom to top:

- curves: Bezier command splines, knot Jacobians, SO(3) helpers
- arm: kinematic chain, tip Jacobian, inverse dynamics, limit checks
- ropesim / ropediff: constrained point-mass rope integrator and its
  implicit-function-theorem linearization
- inverse: the learning QP (critical-point tracking + follow-through)
- tracking: demonstration-tracking trajectory optimization (initial guess)
- demoio: capture files, timing selection, demonstration building
- plant: the simulated "real" system (servo lag, mocap noise, rope presets)
- ilc: the learning loop, transfer and sensitivity experiments
- config / artifacts / cli: experiment configs, run logs, command line
"""

__version__ = "0.1.0"
