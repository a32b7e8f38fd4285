"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (the summary lines appear at the
end of the report) or directly with ``python3 tests/test_acceptance.py``.
Criterion 8 trains four networks and takes several minutes.
"""
import math
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sbss import formats  # noqa: E402
from sbss.backend import OracleBackend, OracleConfig, SceneProfile, generate_scenes  # noqa: E402
from sbss.ecm import EcnWeights, act_fuse, act_threshold, ad_map, ecn_forward  # noqa: E402
from sbss.grid import IGNORE, confidence_map, resize_probmap  # noqa: E402
from sbss.metrics import accumulate, confusion_matrix, miou, profile_scales  # noqa: E402
from sbss.pipeline import RunConfig, run_ms, run_sbss  # noqa: E402
from sbss.scheduler import (MS_SCALES, baseline_ms, baseline_ss, ecs_ms, ecs_ss,  # noqa: E402
                            ms_vote, schedule_ratio)
from sbss.trainer import TrainConfig, batch_arrays, train_schedule  # noqa: E402

import reference  # noqa: E402
from conftest import random_probmap  # noqa: E402

RESULTS = {}


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS[n] = line
    print(line)
    return ok


# 1 ---------------------------------------------------------------------------

def test_1_budget_exactness():
    patch = (128, 128)
    want = {"ecs_ms": 5.625, "ms": 8.6875, "ecs_ss": 0.75, "ss": 1.0}
    scheds = {"ecs_ms": ecs_ms(patch), "ms": baseline_ms(patch),
              "ecs_ss": ecs_ss(patch), "ss": baseline_ss(patch)}
    scenes = generate_scenes(SceneProfile.default(4), 1, (512, 512), seed=0)
    be = OracleBackend.for_scenes(OracleConfig(4, (1.0, 0.5, 1.0, 1.5)), scenes)
    img, iid = scenes.images[0], scenes.ids[0]
    got, executed = {}, {}
    for name, sched in scheds.items():
        got[name] = schedule_ratio(sched)
        if name in ("ecs_ms", "ecs_ss"):
            res = run_sbss(RunConfig(sched, be, "act_only"), img, iid)
        else:
            res = run_ms(be, img, sched.scales, patch, iid)
        executed[name] = res.ledger.ratio
    ok = got == want and executed == want
    record(1, ok, f"schedule_ratio {got}, executed ledger {executed}")
    assert ok


# 2 ---------------------------------------------------------------------------

def test_2_miou_oracle():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for trial in range(100):
        classes = 2 + trial % 4
        pred = rng.integers(0, classes, (16, 16)).astype(np.uint8)
        gt = rng.integers(0, classes, (16, 16)).astype(np.uint8)
        gt[rng.random((16, 16)) < 0.05] = IGNORE
        iou, mean = miou(confusion_matrix(pred, gt, classes))
        want_ious, want_mean = reference.brute_miou([pred], [gt], classes)
        got_ious = [Fraction(v) for v in iou if not np.isnan(v)]
        # IoU_c is a ratio of integers below 2^53, so float division is exact-rounded
        if [float(v) for v in want_ious] != [float(v) for v in got_ious]:
            mismatches += 1
        elif abs(Fraction(mean) - want_mean) > Fraction(1, 10 ** 15):
            mismatches += 1
    _, m3 = miou(np.array([[5, 1, 0], [1, 3, 1], [0, 1, 4]], np.uint64))
    err = abs(m3 - 38 / 63)
    ok = mismatches == 0 and err < 1e-12
    record(2, ok, f"{mismatches}/100 mismatches vs brute force; 38/63 case error {err:.1e}")
    assert ok


# 3 ---------------------------------------------------------------------------

def test_3_gradient_fidelity():
    t0 = time.time()
    worst = 0.0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        w = reference.perturbed(EcnWeights.init(3, seed=seed), seed)
        samples = []
        for _ in range(2):
            t = rng.integers(0, 3, (8, 8)).astype(np.uint8)
            t[rng.random((8, 8)) < 0.1] = IGNORE
            samples.append(reference_sample(rng, t))
        batch = batch_arrays(samples)
        # every tensor; 24 random entries each keeps the check under a minute
        names = [(n, rng.choice(v.size, min(v.size, 24), replace=False))
                 for n, v in w.params.items()]
        try:
            worst = max(worst, reference.fd_check(w, batch, names, tol=1e-4))
        except AssertionError as exc:
            record(3, False, f"seed {seed}: {exc}")
            raise
    elapsed = time.time() - t0
    ok = worst < 1e-4 and elapsed < 60
    record(3, ok, f"worst relative error {worst:.2e} over 3 seeds, C=3, 8x8, {elapsed:.1f} s")
    assert ok


def reference_sample(rng, target):
    from sbss.trainer import TrainSample
    return TrainSample(random_probmap(rng, 3, 8, 8, np.float64),
                       random_probmap(rng, 3, 8, 8, np.float64), target)


# 4 ---------------------------------------------------------------------------

def test_4_convolution_reference():
    worst = 0.0
    for seed, (c, h, w) in enumerate([(2, 4, 4), (3, 5, 4), (2, 3, 6)]):
        rng = np.random.default_rng(seed)
        weights = EcnWeights.init(c, seed=seed)
        for k, v in weights.params.items():
            if k.endswith(".b"):
                v[...] = rng.normal(0, 0.1, v.shape)
        lo, up = random_probmap(rng, c, h, w), random_probmap(rng, c, h, w)
        worst = max(worst, float(np.max(np.abs(ecn_forward(weights, lo, up)
                                               - reference.ecn(weights, lo, up)))))
    ok = worst < 1e-5
    record(4, ok, f"max abs difference to nested-loop oracle {worst:.2e} (3 seeded cases)")
    assert ok


# 5 ---------------------------------------------------------------------------

def test_5_act_contract():
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(1000):
        c = int(rng.integers(2, 6))
        h, w = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        base, cand = random_probmap(rng, c, h, w), random_probmap(rng, c, h, w)
        out, mask = act_fuse(base, cand)
        ad = ad_map(confidence_map(base), confidence_map(cand))
        t = act_threshold(ad)
        ok = (mask.sum() <= math.ceil(h * w / 2) and np.all(ad[mask] > t)
              and np.all(ad[~mask] <= t)
              and out[:, mask].tobytes() == cand[:, mask].tobytes()
              and out[:, ~mask].tobytes() == base[:, ~mask].tobytes())
        same, _ = act_fuse(base, base.copy())
        ok = ok and same.tobytes() == base.tobytes()
        # constant AD map: same confidence everywhere, different winning class
        v = float(rng.uniform(0.3, 0.9))
        lo = np.stack([np.full((h, w), v)] + [np.full((h, w), (1 - v) / (c - 1))] * (c - 1))
        lo = lo.astype(np.float32)
        const_out, const_mask = act_fuse(lo, lo[::-1].copy())
        ok = ok and not const_mask.any() and const_out.tobytes() == lo.tobytes()
        bad += not ok
    record(5, bad == 0, f"{bad}/1000 random maps violate the ACT contract")
    assert bad == 0


# 6 ---------------------------------------------------------------------------

def test_6_normalization():
    rng = np.random.default_rng(6)
    worst = 0.0

    def dev(m):
        return float(np.max(np.abs(m.astype(np.float64).sum(axis=0) - 1.0)))

    weights = [EcnWeights.init(c, seed=c) for c in range(2, 6)]
    for i in range(300):
        c = 2 + i % 4
        h, w = int(rng.integers(1, 20)), int(rng.integers(1, 20))
        m = random_probmap(rng, c, h, w)
        # sharp, nearly one-hot inputs are the hard case for renormalization
        if i % 2:
            m = np.exp(20 * m) / np.exp(20 * m).sum(axis=0)
            m = m.astype(np.float32)
        worst = max(worst, dev(resize_probmap(m, int(rng.integers(1, 40)), int(rng.integers(1, 40)))))
        other = random_probmap(rng, c, h, w)
        if i % 10 == 0:
            worst = max(worst, dev(ecn_forward(weights[c - 2], m, other)))
        worst = max(worst, dev(act_fuse(m, other)[0]))
        maps = [random_probmap(rng, c, int(rng.integers(1, 12)), int(rng.integers(1, 12)))
                for _ in range(int(rng.integers(1, 5)))]
        worst = max(worst, dev(ms_vote(maps, h, w)))
    ok = worst <= 1e-5
    record(6, ok, f"max channel-sum deviation {worst:.2e} over resize/ECN/ACT/ms_vote fuzz")
    assert ok


# 7 ---------------------------------------------------------------------------

def test_7_determinism():
    scenes = generate_scenes(SceneProfile.default(4), 10, (64, 64), seed=70)
    be = OracleBackend.for_scenes(OracleConfig(4, (1.0, 0.5, 1.0, 1.5), seed=7), scenes)
    runs = {}
    for sched in (ecs_ss((16, 16)), ecs_ms((32, 32))):
        weights = [EcnWeights.init(4, seed=i) for i in range(sched.transitions)]
        for workers in (1, 1, 4, 8):
            key = (sched.scheme, workers)
            digest = []
            for iid, img, _ in scenes:
                res = run_sbss(RunConfig(sched, be, "ecn_act", weights, workers), img, iid)
                digest.append((res.probs.tobytes(), res.labels.tobytes()))
            runs.setdefault(sched.scheme, []).append((key, digest))
    ok = all(all(d == group[0][1] for _, d in group) for group in runs.values())
    record(7, ok, "ECS-SS and ECS-MS ecn_act outputs byte-identical across reruns and "
                  "workers {1, 4, 8} on 10 scenes" if ok else "outputs differ")
    assert ok


# 8 ---------------------------------------------------------------------------

C8 = 4
PREFERRED = (1.0, 0.5, 1.0, 1.5)     # background, large, medium, small objects
DIMS = (128, 128)
PATCH = (64, 64)
TRAIN_SCENES = 20
TEST_SCENES = 30
TRAIN = TrainConfig(iterations=1000, batch_size=4, crop=32, lr=0.01, seed=0)


def _corpus_miou(runner, scenes):
    cm = np.zeros((C8, C8), np.uint64)
    for iid, img, gt in scenes:
        cm = accumulate(cm, runner(iid, img).labels, gt)
    return miou(cm)[1]


@pytest.fixture(scope="module")
def stacking_run():
    t0 = time.time()
    profile = SceneProfile.default(C8)
    train_set = generate_scenes(profile, TRAIN_SCENES, DIMS, seed=81, prefix="train")
    test_set = generate_scenes(profile, TEST_SCENES, DIMS, seed=82, prefix="test")
    cfg = OracleConfig(C8, PREFERRED, e_min=0.05, e_max=0.5, gain=0.15, seed=8)
    labels = dict(zip(train_set.ids, train_set.labels))
    labels.update(zip(test_set.ids, test_set.labels))
    be = OracleBackend(cfg, labels)

    table = profile_scales(be, test_set, list(MS_SCALES), PATCH, C8)
    sched = ecs_ms(PATCH)
    weights = train_schedule(TRAIN, be, train_set, sched, "ecn_act")
    scores = dict(
        ms=_corpus_miou(lambda i, im: run_ms(be, im, MS_SCALES, PATCH, i), test_set),
        act_only=_corpus_miou(lambda i, im: run_sbss(RunConfig(sched, be, "act_only"), im, i),
                              test_set),
        ecn_act=_corpus_miou(lambda i, im: run_sbss(RunConfig(sched, be, "ecn_act", weights),
                                                    im, i), test_set))
    return dict(table=table, scores=scores, elapsed=time.time() - t0)


def test_8a_scale_preference(stacking_run):
    found = stacking_run["table"].preferred()
    hits = sum(f == p for f, p in zip(found, PREFERRED))
    ok = hits >= 3
    record("8a", ok, f"profiler preferred scales {found} vs configured {list(PREFERRED)}: "
                     f"{hits}/4 recovered")
    assert ok


def test_8b_stacking_beats_ms(stacking_run):
    s = stacking_run["scores"]
    ok = s["ecn_act"] >= s["ms"]
    record("8b", ok, f"SBSS-MS (ecn_act) mIoU {s['ecn_act']:.5f} vs MS average voting "
                     f"{s['ms']:.5f}")
    assert ok


def test_8c_ecn_beats_act_only(stacking_run):
    s = stacking_run["scores"]
    ok = s["ecn_act"] >= s["act_only"]
    record("8c", ok, f"ecn_act mIoU {s['ecn_act']:.5f} vs act_only {s['act_only']:.5f}")
    assert ok


def test_8d_runtime(stacking_run):
    elapsed = stacking_run["elapsed"]
    ok = elapsed < 15 * 60
    record("8d", ok, f"criterion 8 wall time {elapsed / 60:.1f} min (limit 15)")
    assert ok


# 9 ---------------------------------------------------------------------------

def test_9_format_round_trips(tmp_path):
    rng = np.random.default_rng(9)
    bad = 0
    for i in range(50):
        dims = tuple(int(d) for d in rng.integers(1, 9, size=int(rng.integers(0, 5))))
        arr = rng.standard_normal(dims).astype(np.float32)
        p = tmp_path / f"{i}.tns"
        formats.write_tns(p, arr)
        first = p.read_bytes()
        formats.write_tns(p, formats.read_tns(p))
        bad += p.read_bytes() != first
    for i in range(5):
        w = EcnWeights.init(2 + i, seed=i)
        for v in w.params.values():
            v += rng.standard_normal(v.shape).astype(np.float32)
        p = tmp_path / f"{i}.ecw"
        formats.write_ecw(p, w)
        first = p.read_bytes()
        formats.write_ecw(p, formats.read_ecw(p))
        bad += p.read_bytes() != first
    record(9, bad == 0, f"{bad}/55 .tns/.ecw write-read-write round trips differ")
    assert bad == 0


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
