# Numerical engine: differentiation and optimizers
