# Solver: PINN residuals, training runs and evaluation metrics
