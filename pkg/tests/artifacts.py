"""Cache for the long training runs used by the acceptance suite.

Runs are stored under ``.stac-cache/<key>/`` in the repository root. The key
hashes the config text together with every source file that can change a
training trajectory, so editing either one forces a fresh run.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from stac import cli

ROOT = Path(__file__).resolve().parents[1]
CACHE = ROOT / ".stac-cache"
CONFIGS = ROOT / "configs"
SRC = ROOT / "src" / "stac"
TRAINING_SOURCES = ["diff.py", "linalg.py", "env.py", "nets.py", "cli.py", "rl/*.py"]


def source_hash() -> str:
    h = hashlib.sha256()
    for pattern in TRAINING_SOURCES:
        for path in sorted(SRC.glob(pattern)):
            h.update(path.relative_to(SRC).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def cache_key(config: Path) -> str:
    h = hashlib.sha256(config.read_bytes())
    h.update(source_hash().encode())
    return h.hexdigest()[:16]


def run_cached(name: str) -> tuple[cli.ExperimentConfig, dict]:
    """Run ``configs/<name>.cfg`` unless an artifact set for the same key exists."""
    config = CONFIGS / f"{name}.cfg"
    root = CACHE / cache_key(config)
    cfg = cli.load_config(config, str(root))
    manifest = cfg.output / "manifest.json"
    if not manifest.exists():
        cli.run(config, str(root))
    return cfg, json.loads(manifest.read_text())


def run_csvs(cfg: cli.ExperimentConfig, manifest: dict) -> dict[str, list[Path]]:
    out: dict[str, list[Path]] = {}
    for run in manifest["runs"]:
        csv = next(p for p in run["artifacts"] if p.endswith(".csv"))
        out.setdefault(run["arm"], []).append(cfg.output / csv)
    return out


if __name__ == "__main__":
    import sys

    for name in sys.argv[1:]:
        cfg, _ = run_cached(name)
        print(cfg.output)
