"""Regenerate the bundled 38-channel manifest for the 1582-column IS10 feature set."""

import sys
from pathlib import Path

from mtcae.dataio import is10_manifest, save_manifest

out = Path(sys.argv[1]) if len(sys.argv) > 1 else (
    Path(__file__).resolve().parents[1] / "src" / "mtcae" / "manifests" / "is10_38ch.json")
m = is10_manifest()
save_manifest(m, out)
print(f"{len(m)} channels, {m.n_features} columns -> {out}")
