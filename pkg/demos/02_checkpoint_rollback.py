"""
Checkpointing under failure: the accuracy rewind
================================================

The parameter server saves a checkpoint every 10 updates. We kill it at
step 100 and resurrect it 50 step-times later: it restores the newest
checkpoint on disk and replays from there, so the accuracy trajectory
visibly drops back to the checkpoint-era value — the classic cost of
checkpoint-based recovery.
"""

import tempfile
from pathlib import Path

from faultps import nn
from faultps.chaos import FailurePlan
from faultps.data import synthetic
from faultps.strategies import StrategyConfig, run_strategy

# harder blobs + a low rate keep the model still learning around step 100
dataset = synthetic(2000, seed=7, noise=0.55)
config = StrategyConfig(
    strategy="sync-ckpt",
    num_workers=4,
    batch_size=32,
    base_lr=0.015,
    checkpoint_interval=10,
    eval_interval=10,
    eval_size=512,
    max_steps=160,
    seed=7,
)
plan = FailurePlan.from_dicts([{"target": "ps", "at_step": 100, "down_steps": 50}])

run_dir = Path(tempfile.mkdtemp(prefix="faultps-demo-"))
result = run_strategy(config, dataset, model_spec=nn.small_cnn(),
                      run_dir=run_dir, plan=plan)

kill_t = result.trace.of_kind("kill")[0]["t"]
restore = result.trace.of_kind("restore")[0]
print(f"killed at step 100; restored from checkpoint step {restore['step']}\n")
print("accuracy trajectory (watch the rewind after the kill):")
rewind_marked = False
for ev in result.trace.of_kind("eval"):
    marker = ""
    if ev["t"] > kill_t and not rewind_marked:
        marker = " <- restored: replaying from the checkpoint"
        rewind_marked = True
    bar = "#" * int(40 * ev["accuracy"])
    print(f"  step {ev['step']:4d}  {ev['accuracy']:6.3f}  {bar}{marker}")
print(f"\ncheckpoints written: {sorted(p.name for p in (run_dir / 'checkpoints').iterdir())}")
