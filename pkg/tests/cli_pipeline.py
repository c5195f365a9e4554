"""Drive the command-line pipeline end to end in subprocesses."""
import hashlib
import json
import subprocess
import sys
from pathlib import Path

SMALL_CONFIG = {
    "data": {"train": {"n": 60, "seed": 1, "style_levels": 4}, "eval": {"n": 16, "seed": 2, "style_levels": None}},
    "features": {"n": 48, "sizes": [64, 32], "epochs": 1, "seed": 0, "lr": 0.02},
    "training": {"seed": 0, "max_epochs": 2, "batch_size": 16},
}


def f2p(*args, check=True):
    proc = subprocess.run([sys.executable, "-m", "f2p", *map(str, args)], capture_output=True, text=True)
    if check and proc.returncode != 0:
        raise AssertionError(f"f2p {' '.join(map(str, args))} failed: {proc.stderr}")
    return proc


def run_pipeline(root: Path, config: dict = SMALL_CONFIG) -> dict:
    """gen-data, pretrain, one trained cell per head, fit-ensemble, report.

    Returns the output digests recorded in every provenance file, keyed by
    step and relative path.
    """
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.json"
    cfg.write_text(json.dumps(config))
    c = ("--config", cfg)
    f2p(*c, "gen-data", "--split", "train", "--out", root / "train")
    f2p(*c, "gen-data", "--split", "eval", "--out", root / "eval")
    f2p(*c, "pretrain", "--out", root / "features")
    for head in ("regression", "classification"):
        f2p(*c, "train", "--cell", "complete,full_frame,fe", "--head", head, "--data", root / "train",
            "--features", root / "features", "--out", root / "models" / f"aggregate-{head}")
    f2p(*c, "fit-ensemble", "--models", root / "models", "--data", root / "train", "--out", root / "ensemble")
    f2p(*c, "report", "--ensemble", root / "ensemble", "--eval", root / "eval", "--out", root / "report")
    digests = {}
    for prov in sorted(root.rglob("provenance.json")):
        step = str(prov.parent.relative_to(root))
        for name, sha in json.loads(prov.read_text())["outputs"].items():
            digests[f"{step}/{name}"] = sha
        digests[f"{step}/provenance.json"] = hashlib.sha256(prov.read_bytes()).hexdigest()
    return digests
