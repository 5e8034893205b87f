"""How difficulty scores turn into per-epoch training sets.

Ten samples are ranked easy to hard.  Training starts on the easiest 60%,
admits the rest by epoch 4 and drops the easiest 20% from epoch 6 on.

    python3 demos/scheduler_walkthrough.py
"""
import numpy as np

from padistill import scoring
from padistill.scheduler import SchedulerConfig, build_plan, training_set

scores = np.array([0.9, 0.1, 0.5, 0.3, 0.8, 0.2, 0.7, 0.4, 0.6, 0.05])
ranking = scoring.rank(scores)
print("easy-to-hard ranking:", ranking.tolist())

cfg = SchedulerConfig(initial_ratio=0.6, addition_end_epoch=4, removal_ratio=0.2,
                      removal_epoch=6, removal_mode="direct", total_epochs=8)
plan = build_plan(ranking, cfg)
print(plan.table(), end="")
for e in range(plan.epochs):
    print(f"epoch {e}: {sorted(training_set(plan, e).tolist())}")
