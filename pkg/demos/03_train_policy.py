"""
Training the Q-network policy
=============================

Every robot shares one attention Q-network that looks at its seven nearest
neighbours and picks one of four actions. Training uses global coverage and
mixing changes in the reward, which only the trainer sees. This script runs
a short training job and compares greedy rollouts of the trained and
untrained networks. The full-length run is ``swarmwall train --steps 50000``.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from swarmwall.config import SimConfig, TrainingConfig
from swarmwall.qnet import Action, RlController, load_checkpoint
from swarmwall.scenarios import ScenarioSpec
from swarmwall.sim import init_world, tick
from swarmwall.training import Trainer, evaluate, train

scenario = ScenarioSpec(3, 10, 10)
sim = SimConfig()
config = TrainingConfig(total_steps=3000, checkpoint_interval=1000)

# %%
# Train. Checkpoints hold the full state, so ``resume=`` continues bit for bit.
out = Path(tempfile.mkdtemp(prefix="swarmwall-train-"))
final, rows = train(scenario, sim, config, seed=0, checkpoint_dir=out)
losses = [r["loss"] for r in rows if np.isfinite(r["loss"])]
print(f"checkpoints in {out}; last loss {losses[-1]:.4f}, epsilon now {rows[-1]['epsilon']:.3f}")

# %%
# Greedy evaluation on held-out seeds, against the same network before training.
seeds = range(10_000, 10_005)
before = evaluate(Trainer(scenario, sim, config, seed=0).online, scenario, sim, seeds)
after = evaluate(load_checkpoint(final), scenario, sim, seeds)
print(f"mixing at step 1000: untrained {before.mean():.1f}%, trained {after.mean():.1f}%")

# %%
# What does the policy actually do? Count the greedy actions over one episode.
world = init_world(scenario, sim, seed=10_000)
ctrl = RlController(load_checkpoint(final), epsilon=0.0, rng=np.random.default_rng(0))
counts = np.zeros(4)
for _ in range(1000):
    tick(world, ctrl)
    counts += np.bincount(ctrl.last_actions, minlength=4)
for a in Action:
    print(f"{a.name:20s} {counts[a] / counts.sum():6.1%}")
