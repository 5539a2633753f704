"""Fit a small DVMN to four synthetic road scenes.

A memorisation run: with a handful of samples the loss should collapse and the
completed maps approach the ground truth. Takes about a minute and a half on
one core. Use --steps to shorten it.
"""

import argparse
import time

from sparseconv.data import synth_dataset
from sparseconv.network import NetworkConfig, build_dvmn, parameter_count
from sparseconv.training import OptimizerState, ScheduleConfig, depth_errors, predict, train_loop

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=200)
args = ap.parse_args()

samples = synth_dataset(4, 64, 128, seed=0)
model = build_dvmn(NetworkConfig(C=8, stages=3, bottlenecks_per_stage=2, sisl_count=2), 0)
print(f"{parameter_count(model):,} parameters")

rmse0, _ = depth_errors(predict(model, samples), samples)
t = time.perf_counter()
res = train_loop(model, samples, args.steps, batch_size=4,
                 optimizer=OptimizerState("adam", lr=1e-3),
                 schedule=ScheduleConfig(enabled=False))
rmse, mae = depth_errors(predict(model, samples), samples)
print(f"loss {res.step_losses[0]:.4g} -> {res.step_losses[-1]:.4g} in {time.perf_counter() - t:.0f} s")
print(f"train RMSE {rmse0:.0f} mm -> {rmse:.0f} mm, MAE {mae:.0f} mm")
