# Test package for the flow perturbation sampler
