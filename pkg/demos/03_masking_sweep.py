#!/usr/bin/env python3
# Train GRACE and the mean-pool head on a small dataset and mask test frames.
# Takes about a minute on one core. At this size (160 training clips, 10 epochs)
# neither head is fully trained and the ranking between them is noisy; the
# acceptance suite uses the full 500-sample, 20-epoch desk run.

from grace.harness import ExperimentConfig, materialize_splits, train_models, evaluate_grid
from grace.feature_context import make_manifest

# In[1]:

cfg = ExperimentConfig.from_dict({
    "n_samples": 200,
    "train": {"epochs": 10},
    "eval_m_r_list": [0.0, 0.4, 0.8],
    "modes": ["background"],
})
data = materialize_splits(make_manifest(cfg.generator, cfg.n_samples, cfg.seed))
print(len(data.train), "train /", len(data.test), "test")

# In[2]:

runs = train_models(cfg, data)
for name, r in runs.items():
    print(name, "final train loss", round(r.trace[-1]["train_loss"], 4))

# In[3]:

rows, base = evaluate_grid({k: r.model for k, r in runs.items()}, data.test, cfg)
for r in rows + base:
    print(f"{r['model']:9s} m_r={r['m_r']:.1f}  auc={r['auc']:.3f}  acc={r['accuracy']:.3f}")
