#!/usr/bin/env python3
# Fixed-point iteration of one graph-convolution layer, with and without contraction.

import numpy as np

from grace.convergence import audit_assumptions, measure_contraction, weight_with_norm
from grace.entanglement import random_feature_graph

# In[1]:

g = random_feature_graph(seed=5, d=16, c=4)
rng = np.random.default_rng(1)
Z0 = rng.standard_normal((16, 4))

# In[2]:

# ||W|| = 0.7: the layer map is a contraction and the rate never beats L_f.
W = weight_with_norm(rng, 4, 0.7)
a = measure_contraction(g, W, Z0, iters=500)
print(a.verdict, "L_f =", round(a.L_f, 4), "max ratio =", round(a.max_ratio, 4))
print("step <= 1e-10 after", a.residual_reached_at, "iterations")

# In[3]:

# The scalar case is an exact geometric series. Run it until the iterate
# underflows to the fixed point so Z* carries no estimation error.
s = measure_contraction(np.array([[1.0]]), [[0.5]], [[1.0]], iters=2000)
print(s.distance_trace[:6], "max |r - 0.5| =", max(abs(r - 0.5) for r in s.contraction_trace))

# In[4]:

# Scaling W up by 3 gives L_f > 1; the bound says nothing any more.
big = audit_assumptions(g, [3 * W])
print(big.verdict, "L_f =", round(big.L_f, 3), "paper-style bound =", round(big.L_f_paper_bound, 3))
