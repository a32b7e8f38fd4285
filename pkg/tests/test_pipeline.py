import numpy as np
import pytest

from sbss import OracleBackend, OracleConfig, SceneProfile, generate_scenes
from sbss.ecm import EcnWeights, FusionMode
from sbss.grid import make_patch_grid, pad_to, resize_probmap, scaled_dims
from sbss.metrics import accumulate, miou
from sbss.pipeline import (BackendError, ConfigError, RunConfig, run_ms, run_sbss, run_ss,
                           tiled_segment)
from sbss.scheduler import ScaleSchedule, ecs_ms, ecs_ss, schedule_ratio
from conftest import passthrough_weights


class ConstantBackend:
    kind = "constant"
    flops_per_pixel = 1.0

    def __init__(self, vec):
        self.vec = np.asarray(vec, np.float32)

    def segment(self, patch, scale, key):
        return np.broadcast_to(self.vec[:, None, None], (len(self.vec),) + patch.shape[:2]).copy()


class FailingBackend(ConstantBackend):
    def segment(self, patch, scale, key):
        if scale > 0.6:
            raise RuntimeError("boom")
        return super().segment(patch, scale, key)


@pytest.fixture(scope="module")
def big_scene():
    s = generate_scenes(SceneProfile.default(4), 1, (512, 512), seed=2)
    cfg = OracleConfig(4, (1.0, 0.5, 1.0, 1.5))
    return s, OracleBackend.for_scenes(cfg, s)


def corpus_miou(runner, scenes, classes=4):
    cm = np.zeros((classes, classes), np.uint64)
    for iid, img, gt in scenes:
        cm = accumulate(cm, runner(iid, img).labels, gt)
    return miou(cm)[1]


class TestLedgerExactness:
    @pytest.mark.parametrize("make", [ecs_ss, ecs_ms])
    def test_divisible_image(self, big_scene, make):
        scenes, be = big_scene
        sched = make((128, 128))
        res = run_sbss(RunConfig(sched, be, "act_only"), scenes.images[0], scenes.ids[0])
        assert res.ledger.ratio == schedule_ratio(sched)
        assert res.ledger.slack_pixels == 0

    def test_ss(self, big_scene):
        scenes, be = big_scene
        assert run_ss(be, scenes.images[0], (128, 128), scenes.ids[0]).ledger.ratio == 1.0


class TestRunSbss:
    def test_single_scale_equals_tiled(self, small_scenes, small_oracle):
        sched = ScaleSchedule((1.0,), (1,), (32, 32))
        iid, img = small_scenes.ids[0], small_scenes.images[0]
        for mode in FusionMode:
            res = run_sbss(RunConfig(sched, small_oracle, mode, []), img, iid)
            ref = tiled_segment(small_oracle, img, 1.0, (32, 32), iid)
            assert res.probs.tobytes() == ref.tobytes()
            assert res.probs.shape == (4, 64, 64) and res.labels.shape == (64, 64)

    def test_identical_maps_keep_decisions(self, small_scenes):
        be = ConstantBackend([0.1, 0.6, 0.3])
        sched = ecs_ms((32, 32))
        res = run_sbss(RunConfig(sched, be, "act_only"), small_scenes.images[0])
        assert np.all(res.labels == 1)
        assert all(f == 0.0 for t in res.diagnostics["transitions"]
                   for f in t["replaced_fraction"])

    def test_unselected_pixels_byte_exact(self, small_scenes, small_oracle):
        iid, img = small_scenes.ids[1], small_scenes.images[1]
        sched = ScaleSchedule((0.5, 1.0, 1.5), (1, 0.5, 0.25), (16, 16))
        trace = []
        run_sbss(RunConfig(sched, small_oracle, "act_only"), img, iid, trace=trace)
        prev = tiled_segment(small_oracle, img, 0.5, (16, 16), iid)
        for i, (resized, out, rects) in enumerate(trace):
            h, w = scaled_dims(64, 64, sched.scales[i + 1])
            grid = make_patch_grid(h, w, 16, 16)
            expect = pad_to(resize_probmap(prev, h, w), grid.padded_h, grid.padded_w)
            assert resized.tobytes() == expect.tobytes()
            covered = np.zeros(out.shape[1:], bool)
            for r in rects:
                covered[r.slices()] = True
            assert 0 < covered.mean() < 1
            assert out[:, ~covered].tobytes() == resized[:, ~covered].tobytes()
            prev = np.ascontiguousarray(out[:, :h, :w])

    def test_error_free_oracle_every_mode(self):
        scenes = generate_scenes(SceneProfile.default(4), 3, (96, 96), seed=4)
        be = OracleBackend.for_scenes(OracleConfig(4, (1, 1, 1, 1), e_min=0.0, gain=0.0), scenes)
        sched = ecs_ms((32, 32))
        ws = [passthrough_weights(4)] * sched.transitions
        for mode in FusionMode:
            cfg = RunConfig(sched, be, mode, ws)
            assert corpus_miou(lambda i, im: run_sbss(cfg, im, i), scenes) >= 0.99

    def test_full_fraction_ecn_act_call_sequence(self, small_scenes, small_oracle):
        sched = ecs_ms((32, 32))
        ws = [EcnWeights.init(4, seed=i) for i in range(4)]
        res = run_sbss(RunConfig(sched, small_oracle, "ecn_act", ws), small_scenes.images[0],
                       small_scenes.ids[0])
        ts = res.diagnostics["transitions"]
        assert [t["to_scale"] for t in ts] == [0.75, 1.0, 1.25, 1.5]
        for t in ts:
            assert t["mode"] == "ecn_act"
            assert t["patches_selected"] == t["patches_total"] == t["backend_calls"]
            assert t["ecn_calls"] == t["act_calls"] == t["patches_total"]
            assert all(0 <= f <= 0.5 + 1e-9 for f in t["replaced_fraction"])
        assert res.ledger.ecn_pixels > 0
        assert res.ledger.flops > res.ledger.backend_pixels * small_oracle.flops_per_pixel

    def test_workers_and_reruns_identical(self, small_scenes, small_oracle):
        sched = ecs_ss((16, 16))
        ws = [EcnWeights.init(4, seed=i) for i in range(3)]
        outs = []
        for workers in (1, 1, 4, 8):
            res = run_sbss(RunConfig(sched, small_oracle, "ecn_act", ws, workers),
                           small_scenes.images[2], small_scenes.ids[2])
            outs.append((res.probs.tobytes(), res.labels.tobytes(), res.ledger.report()))
        assert all(o == outs[0] for o in outs)

    def test_missing_weights(self, small_oracle):
        with pytest.raises(ConfigError, match="weights"):
            RunConfig(ecs_ms((8, 8)), small_oracle, "ecn_act")
        with pytest.raises(ConfigError, match="weights"):
            RunConfig(ecs_ms((8, 8)), small_oracle, "ecn_only", [EcnWeights.zeros(4)])
        with pytest.raises(ConfigError, match="mode"):
            RunConfig(ecs_ms((8, 8)), small_oracle, "blend")
        with pytest.raises(ConfigError, match="workers"):
            RunConfig(ecs_ms((8, 8)), small_oracle, "act_only", workers=0)

    def test_backend_failure_has_context(self, small_scenes):
        be = FailingBackend([0.5, 0.5])
        with pytest.raises(BackendError, match=r"image 'x'.*scale 0.75.*rect \[0, 0, 16, 16\]"):
            run_sbss(RunConfig(ecs_ms((16, 16)), be, "act_only"), small_scenes.images[0], "x")


class TestBaselines:
    def test_ms_single_scale_is_ss(self, small_scenes, small_oracle):
        iid, img = small_scenes.ids[0], small_scenes.images[0]
        a = run_ms(small_oracle, img, (1.0,), (32, 32), iid)
        b = run_ss(small_oracle, img, (32, 32), iid)
        assert a.probs.tobytes() == b.probs.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_identical_maps(self, small_scenes):
        be = ConstantBackend([0.2, 0.3, 0.5])
        res = run_ms(be, small_scenes.images[0], (0.5, 1.0, 1.5), (16, 16))
        np.testing.assert_allclose(res.probs[:, 5, 7], [0.2, 0.3, 0.5], atol=1e-6)

    def test_ms_not_worse_than_worst_ss(self):
        scenes = generate_scenes(SceneProfile.default(4), 4, (96, 96), seed=11)
        be = OracleBackend.for_scenes(OracleConfig(4, (0.5, 1.0, 1.5, 1.0)), scenes)
        scales = (0.5, 1.0, 1.5)
        ms = corpus_miou(lambda i, im: run_ms(be, im, scales, (32, 32), i), scenes)
        singles = [corpus_miou(lambda i, im: run_ms(be, im, (s,), (32, 32), i), scenes)
                   for s in scales]
        assert ms >= min(singles)

    def test_empty_scales(self, small_oracle):
        with pytest.raises(ConfigError):
            run_ms(small_oracle, np.zeros((8, 8, 3), np.uint8), (), (8, 8))
