"""Inverse iteration for nonlinear eigenproblems A(w) = lambda ||w||_Y^(p-q) B(w) on grids."""
