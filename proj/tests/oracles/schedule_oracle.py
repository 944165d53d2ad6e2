# Independent oracle for frozen test values (schedule products, Adam step traces,
# energy distance, OU deviation closed forms). Run: python3 schedule_oracle.py
import math
import numpy as np

T = 100
betas = np.linspace(1e-4, 0.02, T)
abar = np.cumprod(1 - betas)
print("alpha_bar[100] =", repr(abar[-1]))

# Adam two identical steps, scalar p=1, g=1, lr 0.1, b1 .9 b2 .999 eps 1e-8
p, m, v = 1.0, 0.0, 0.0
trace = []
for k in range(1, 3):
    g = 0.5 * p  # grad of 0.25 p^2 at current p
    m = 0.9 * m + 0.1 * g
    v = 0.999 * v + 0.001 * g * g
    mh = m / (1 - 0.9 ** k)
    vh = v / (1 - 0.999 ** k)
    p = p - 0.1 * mh / (math.sqrt(vh) + 1e-8)
    trace.append(p)
print("adam trace =", [repr(x) for x in trace])

# expected per-coordinate optimal conditional eps-MSE for a single Gaussian mode with var 0.1
s2 = 0.1
print("ideal eps mse (single mode) =", np.mean(abar * s2 / (abar * s2 + 1 - abar)))

# OU deviation closed form for A = mu I descent, tr S1 = tr S2 = 1
for mu, Tt in [(1.0, 5.0), (1.0, 10.0)]:
    print("ou", mu, Tt, 2 / (2 * mu) * (1 - math.exp(-2 * mu * Tt)))
print("bound_smooth L=1 T=1 s=1,1:", repr((2) / 2 * (math.exp(2) - 1)))
