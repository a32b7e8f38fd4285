"""Processed-area and flops budget of each schedule on a 512x1024 image."""
import numpy as np

from sbss import EcnWeights, OracleBackend, OracleConfig, RunConfig, baseline_ms, ecs_ms, ecs_ss
from sbss import baseline_ss, run_ms, run_sbss, schedule_ratio

PATCH = (256, 256)
H, W = 512, 1024

for sched in (baseline_ms(PATCH), ecs_ms(PATCH), baseline_ss(PATCH), ecs_ss(PATCH)):
    print(f"{sched.scheme:<7} scales {[float(s) for s in sched.scales]}  "
          f"fractions {[str(f) for f in sched.fractions]}  ratio {schedule_ratio(sched):.4f}")

# execute on a blank scene so the ledger counts real backend calls; the image
# is not divisible into 256x256 patches at every scale, so padded partial
# patches push the executed ratios above the nominal ones
labels = np.zeros((H, W), np.uint8)
backend = OracleBackend(OracleConfig(2, (1.0, 1.0)), {"blank": labels})
image = np.zeros((H, W, 3), np.uint8)
print()
for sched in (ecs_ms(PATCH), ecs_ss(PATCH)):
    weights = [EcnWeights.init(2, seed=i) for i in range(sched.transitions)]
    res = run_sbss(RunConfig(sched, backend, "ecn_act", weights), image, "blank")
    rep = res.ledger.report()
    print(f"{sched.scheme}: executed ratio {rep['ratio']:.4f}, "
          f"backend+ECN {rep['flops'] / 1e12:.2f} TFlops")
    for e in rep["scales"]:
        print(f"   scale {e['scale']:<5} backend px {e['backend_pixels']:>9}  "
              f"ECN px {e['ecn_pixels']:>9}  padding {e['padding_slack_pixels']:>8}")
res = run_ms(backend, image, baseline_ms(PATCH).scales, PATCH, "blank")
print(f"ms: executed ratio {res.ledger.ratio:.4f}, {res.ledger.flops / 1e12:.2f} TFlops")
