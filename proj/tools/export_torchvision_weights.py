#!/usr/bin/env python3
"""Export torchvision EfficientNet backbone weights for the C++ encoder.

Writes <out>/efficientnet_bN.safetensors with every `features.*` parameter and
buffer, plus the sidecar manifest the loader checks. Point EFFISEGNET_WEIGHTS_DIR
at <out> afterwards.

    python tools/export_torchvision_weights.py --variant b4 --out ~/.cache/effisegnet/weights
"""

import argparse
import datetime
import hashlib
import json
import pathlib
import sys

import torch
import torchvision
from safetensors.torch import save_file

VARIANTS = [f"b{i}" for i in range(8)]


def build(variant: str, random_init: bool, seed: int) -> torch.nn.Module:
    factory = getattr(torchvision.models, f"efficientnet_{variant}")
    if random_init:
        torch.manual_seed(seed)
        return factory(weights=None)
    return factory(weights="DEFAULT")


def export(model: torch.nn.Module, variant: str, out_dir: pathlib.Path, source: str) -> pathlib.Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items() if k.startswith("features.")}
    path = out_dir / f"efficientnet_{variant}.safetensors"
    save_file(state, str(path), metadata={"variant": variant, "source": source})
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    manifest = {
        "variant": variant,
        "source": source,
        "sha256": digest,
        "tensors": len(state),
        "exported_at": datetime.datetime.now(datetime.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
        "torchvision": torchvision.__version__,
    }
    path.with_name(path.name + ".manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--variant", choices=VARIANTS + ["all"], default="all")
    p.add_argument("--out", type=pathlib.Path, required=True)
    p.add_argument("--random", action="store_true", help="export a seeded random initialization (no download)")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    for variant in VARIANTS if args.variant == "all" else [args.variant]:
        source = f"torchvision:efficientnet_{variant}" + (f":random:{args.seed}" if args.random else "")
        path = export(build(variant, args.random, args.seed), variant, args.out, source)
        print(f"{variant}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
