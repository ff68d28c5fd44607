"""
Relaxed chain replication: failover without checkpoints
=======================================================

Three servers register ephemeral znodes under /servers and each backup
watches its predecessor. Every 5 updates the frontend puts its weights in
the object store and passes the reference down its znode; the successor
installs them, acknowledges, and propagates. When we kill the frontend,
the secondary's watch fires, it promotes itself (bumping the frontend
epoch), and training resumes from its warm, slightly stale weights —
no disk, no rewind to an old checkpoint.
"""

from faultps import nn
from faultps.chaos import FailurePlan
from faultps.data import synthetic
from faultps.strategies import StrategyConfig, run_strategy

dataset = synthetic(400, seed=1)
config = StrategyConfig(
    strategy="sync-chain",
    num_workers=2,
    batch_size=8,
    base_lr=0.05,
    chain_length=3,
    replication_interval=5,
    eval_interval=20,
    eval_size=100,
    max_steps=160,
    seed=7,
)
plan = FailurePlan.from_dicts([
    {"target": "ps", "at_step": 60, "down_steps": 30},   # frontend dies, rejoins as tail
    {"target": "ps", "at_step": 110, "down_steps": 30},  # the promoted one dies too
])

result = run_strategy(config, dataset, model_spec=nn.mlp(hidden=(16,)), plan=plan)

print("chain events:")
for ev in result.trace.events:
    if ev["kind"] in ("chain_join", "replicate", "promote", "kill", "resurrect",
                      "frontend_claim"):
        detail = {k: v for k, v in ev.items() if k not in ("seq", "t", "kind")}
        print(f"  t={ev['t']:7.3f}  {ev['kind']:15s} {detail}")

print(f"\nfinal step: {result.summary['final_step']}, "
      f"final accuracy: {result.summary['final_accuracy']:.3f}")
print("note: each promotion resumes from the promoted server's last installed "
      "replica, at most one replication interval behind the kill point")
