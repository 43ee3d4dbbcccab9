"""Two-scale monotone finite elements for A(x):D^2u = f."""
