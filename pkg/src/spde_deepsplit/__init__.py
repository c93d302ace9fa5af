"""Deep splitting approximations for stochastic PDEs."""
