"""Distill Gaussian blobs into one image per class and compare with a random pick.

Runs every stage through the library API in a couple of minutes of CPU time:
difficulty scoring, a scheduled expert buffer, trajectory matching and
evaluation.

    python3 demos/distill_blobs.py
"""
from padistill import data as D
from padistill import evalharness as ev
from padistill import matching as M
from padistill import nets, scoring, trajectory
from padistill.scheduler import SchedulerConfig, build_plan

train = D.gen_blobs(10, 500, (1, 8, 8), spread=1.0, seed=0)
test = D.gen_blobs(10, 200, (1, 8, 8), spread=1.0, seed=0, split="test")
spec = nets.make_spec("tiny-mlp", train.image_shape, 10)

scores = scoring.el2n(train, spec, t=4, S=5)
plan = build_plan(scores, SchedulerConfig(0.75, 20, total_epochs=40))
buf = trajectory.train_buffer(train, plan, spec, n_experts=5, epochs=40, lr=0.01,
                              batch_size=256)

cfg = M.TMConfig(batch_syn=10, iterations=300,
                 match=trajectory.MatchRange(0, 4, 4, 0, 2))
syn0 = D.init_synthetic(train, 1, seed=0)
syn, records = M.distill_tm(syn0, buf, spec, cfg, M.MaskSpec(0.0))
print(f"matching loss: {records[0]['loss']:.3f} -> {records[-1]['loss']:.3f}")

ecfg = ev.EvalConfig()
print("distilled", ev.evaluate(syn, test, spec, ecfg, seeds=(0, 1, 2)).summary())
print("   random", ev.evaluate(ev.random_coreset(train, 1, 0), test, spec, ecfg,
                               seeds=(0, 1, 2)).summary())
