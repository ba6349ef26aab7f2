"""Append-only run manifests with deterministic content hashes.

Every pipeline command appends one entry to ``manifest.json`` in the output
directory. The entry's ``manifest_hash`` covers only the reproducibility
core (command, config snapshot, seeds, design-decision flags, input file
hashes) so reports can cite it while staying bit-identical across reruns;
wall-clock timestamps and output hashes are recorded but never hashed.
"""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path

FORMAT_VERSION = 1

# Module-level design decisions every run records; reports surface these so
# results cannot masquerade as exact reproductions of unstated settings.
BASE_FLAGS = {
    "attention_tokenization": "encoded row split into age-derived and gender-derived tokens",
    "pretrain_loss": "masked mean squared error on the comorbidity score",
    "significance_test": "welch unequal-variance t-test",
    "ci_method": "bootstrap percentile (2.5/97.5)",
    "downstream_learner": "reimplementation (leaf-wise histogram gbdt)",
}


def stable_seed(master: int, *parts) -> int:
    """Deterministic 64-bit seed derived from the master seed and labels."""
    text = "/".join([str(master)] + [str(p) for p in parts])
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "big")


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class ManifestEntry:
    def __init__(self, command: str, config_snapshot: dict, master_seed: int,
                 seeds: dict, flags: dict, input_paths: list[str | Path]):
        self.entry = {
            "format_version": FORMAT_VERSION,
            "command": command,
            "config": config_snapshot,
            "master_seed": master_seed,
            "seeds": seeds,
            "flags": {**BASE_FLAGS, **flags},
            "input_hashes": {Path(p).name: file_sha256(p) for p in input_paths},
        }
        core = _canonical(self.entry)
        self.hash = hashlib.sha256(core.encode()).hexdigest()
        self.entry["manifest_hash"] = self.hash
        self.entry["started_at"] = datetime.now(timezone.utc).isoformat()
        self.entry["output_hashes"] = {}
        self.entry["notes"] = []

    def note(self, text: str) -> None:
        self.entry["notes"].append(text)

    def record_output(self, path: str | Path) -> None:
        self.entry["output_hashes"][Path(path).name] = file_sha256(path)

    def finish(self, out_dir: str | Path) -> Path:
        self.entry["finished_at"] = datetime.now(timezone.utc).isoformat()
        return append_entry(out_dir, self.entry)


def manifest_path(out_dir: str | Path) -> Path:
    return Path(out_dir) / "manifest.json"


def append_entry(out_dir: str | Path, entry: dict) -> Path:
    path = manifest_path(out_dir)
    entries = []
    if path.exists():
        entries = json.loads(path.read_text(encoding="utf-8"))
    entries.append(entry)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")
    return path


def read_manifest(out_dir: str | Path) -> list[dict]:
    path = manifest_path(out_dir)
    if not path.exists():
        return []
    return json.loads(path.read_text(encoding="utf-8"))
