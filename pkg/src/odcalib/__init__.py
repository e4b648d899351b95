"""Real-time origin-destination (OD) demand calibration toolkit.

A stochastic cell-transmission corridor simulator acts as the (black-box)
plant, a small feedforward network proposes next-interval OD demand, and a
linear analytic metamodel supplies the gradient that lets the measurement
loss flow back into the network weights even though the simulator itself is
not differentiable.

Subpackages:
    scenario   -- domain types, scenario file parsing, demand generation
    sim        -- cell-transmission plant, detectors, day runner
    metamodel  -- analytic demand-to-density surrogate and its Jacobian
    predictor  -- from-scratch MLP (forward/backward/SGD) and input encoding
    calib      -- losses, gradient assembly, pre-training, online loop
    harness    -- command-line experiment driver
"""

__version__ = "0.1.0"
