"""End-to-end command-line run in a temporary directory, using the README spec."""
import json
import subprocess
import sys
import tempfile
from pathlib import Path

SPEC = {
    "scheme": "ecs_ms",
    "mode": "ecn_act",
    "patch": [64, 64],
    "classes": 4,
    "seed": 1,
    "corpus": "corpus",
    "out": "run",
    "synth": {"count": 20, "dims": [128, 128]},
    "backend": {"kind": "oracle", "oracle": {"preferred_scales": [1.0, 0.5, 1.0, 1.5]}},
    "train": {"iterations": 100, "batch_size": 4, "crop": 32, "lr": 0.01},
}


def sbss(*args, cwd):
    cmd = [sys.executable, "-m", "sbss.cli", *args]
    print("$ sbss", " ".join(args), flush=True)
    subprocess.run(cmd, cwd=cwd, check=True)


with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    (tmp / "run.json").write_text(json.dumps(SPEC, indent=1))
    sbss("synth", "--config", "run.json", "--out", "corpus", cwd=tmp)
    sbss("budget", "--config", "run.json", cwd=tmp)
    sbss("profile", "--config", "run.json", "--out", "profile", "--scales", "0.5,1,1.5", cwd=tmp)
    sbss("train-ecn", "--config", "run.json", cwd=tmp)
    sbss("infer", "--config", "run.json", cwd=tmp)
    sbss("eval", "--pred", "run", "--gt", "corpus/labels", cwd=tmp)
    ledger = json.loads(next((tmp / "run").glob("*.ledger.json")).read_text())
    print(f"processed-area ratio per image: {ledger['ratio']}")
