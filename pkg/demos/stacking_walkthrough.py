"""Train ECNs for ECS-MS on a small synthetic corpus and compare fusion modes.

Takes a few minutes on one CPU core.  Pass an iteration count to change the
training length (default 300).
"""
import sys
import time

import numpy as np

from sbss import (OracleBackend, OracleConfig, RunConfig, SceneProfile, TrainConfig, accumulate,
                  ecs_ms, generate_scenes, miou, run_ms, run_sbss, train_schedule)
from sbss.scheduler import MS_SCALES

CLASSES = 4
iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300

profile = SceneProfile.default(CLASSES)
train_set = generate_scenes(profile, 20, (128, 128), seed=1, prefix="train")
test_set = generate_scenes(profile, 10, (128, 128), seed=2, prefix="test")
labels = {**dict(zip(train_set.ids, train_set.labels)), **dict(zip(test_set.ids, test_set.labels))}
backend = OracleBackend(OracleConfig(CLASSES, (1.0, 0.5, 1.0, 1.5)), labels)
sched = ecs_ms((64, 64))

t0 = time.time()
cfg = TrainConfig(iterations=iterations, batch_size=4, crop=32, lr=0.01)


def log(i, it, lr, loss):
    if it % 100 == 0 or it == iterations - 1:
        print(f"transition {i} iter {it:4d} lr {lr:.4f} loss {loss:.4f}")


weights = train_schedule(cfg, backend, train_set, sched, log_fn=log)
print(f"trained {len(weights)} networks in {time.time() - t0:.0f} s\n")


def score(run):
    cm = np.zeros((CLASSES, CLASSES), np.uint64)
    for image_id, image, gt in test_set:
        cm = accumulate(cm, run(image_id, image).labels, gt)
    return miou(cm)[1]


print(f"MS average voting   {score(lambda i, im: run_ms(backend, im, MS_SCALES, (64, 64), i)):.4f}")
for mode in ("act_only", "ecn_only", "ecn_act"):
    cfg_run = RunConfig(sched, backend, mode, weights)
    print(f"ECS-MS {mode:<12} {score(lambda i, im: run_sbss(cfg_run, im, i)):.4f}")
