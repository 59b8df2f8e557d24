#!/usr/bin/env python3
# Build one entangled graph from a synthetic clip and look at its spectrum.

import numpy as np

from grace.entanglement import build_graph, diagnostics, spectral_response
from grace.feature_context import GeneratorConfig, generate_sample, project_and_assemble

# In[1]:

# A small clip: 4 frames of 2x2 feature maps with 8 channels.
cfg = GeneratorConfig(N=4, h=2, w=2, c_in=8, signal_amplitude=0.5)
sample = generate_sample(cfg, label=1, seed=3)
print(sample.frames.shape, sample.validity)

# In[2]:

# Project every location to 4 channels and rectify.
rng = np.random.default_rng(0)
ctx = project_and_assemble(sample, rng.standard_normal((8, 4)), np.zeros(4))
X = ctx.X.value
print("X:", X.shape, "min", X.min())

# In[3]:

g = build_graph(X, q=0.5)
print("kept entries:", g.nnz, "of", g.d**2)
diag = diagnostics(g)
print("L_norm spectrum:", np.round(diag.eigenvalues, 4))
print("zero eigenvalues:", diag.zero_multiplicity, "components:", diag.component_count)

# In[4]:

# One application of M scales each eigenmode by (1 - lambda).
for lam, gain in spectral_response(g)[:: max(1, g.d // 6)]:
    print(f"lambda={lam:.3f}  gain={gain:.3f}")
