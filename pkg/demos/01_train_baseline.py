"""
Baseline: synchronous data-parallel training, no failures
=========================================================

Four workers compute gradients on disjoint shards of a synthetic image set;
the parameter server waits for all of them, averages, and applies one SGD
update per iteration. Everything runs on the deterministic simulated clock,
so rerunning this script reproduces the numbers bit for bit.
"""

from faultps import nn
from faultps.data import synthetic
from faultps.strategies import StrategyConfig, run_strategy

# a small CNN and an easily separable blob dataset keep this to ~10 seconds
dataset = synthetic(2000, seed=7)
config = StrategyConfig(
    strategy="sync-ckpt",
    num_workers=4,
    batch_size=32,
    base_lr=0.05,
    max_steps=120,
    eval_interval=20,
    eval_size=512,
    seed=7,
)

result = run_strategy(config, dataset, model_spec=nn.small_cnn())

print("accuracy trajectory:")
for ev in result.trace.of_kind("eval"):
    bar = "#" * int(40 * ev["accuracy"])
    print(f"  step {ev['step']:4d}  {ev['accuracy']:6.3f}  {bar}")
print()
for key, value in result.summary.items():
    print(f"{key}: {value}")
