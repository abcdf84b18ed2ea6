"""fwnav: vision-based navigation stack for agile fixed-wing UAVs.

Subpackage map:
  se3        rigid transforms + translation-covariance propagation
  world      axis-aligned-box / triangle-soup world models and YAML IO
  depthsim   pinhole depth-camera raycaster with sensor noise
  fovmap     rolling-history field-of-view-aware point-cloud map
  collision  distance / probability-of-collision constraint metrics
  dynamics   flat-plate fixed-wing dynamics with analytic Jacobians
  planner    frontier-constrained RRT global planner + path post-processing
  nmpc       Hermite-Simpson direct-collocation receding-horizon controller
  harness    closed-loop simulation trials, experiments, and CSV logging
"""

__version__ = "0.1.0"
