"""Per-class IoU at each resizing scale, the measurement behind scale preference.

The synthetic oracle is told that each class has a favourite scale; the
profiler should find it back from segmentation output alone.
"""
from sbss import OracleBackend, OracleConfig, SceneProfile, generate_scenes, profile_scales

CLASSES = 4
PREFERRED = (1.0, 0.5, 1.0, 1.5)

scenes = generate_scenes(SceneProfile.default(CLASSES), 20, (128, 128), seed=3)
backend = OracleBackend.for_scenes(OracleConfig(CLASSES, PREFERRED), scenes)
table = profile_scales(backend, scenes, [0.5, 0.75, 1.0, 1.25, 1.5, 1.75], (64, 64), CLASSES)

print(table.to_csv())
for c, (found, want) in enumerate(zip(table.preferred(), PREFERRED)):
    print(f"class {c}: configured {want}, profiled {found}")
