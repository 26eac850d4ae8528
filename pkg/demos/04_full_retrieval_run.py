"""End-to-end retrieval run from a manifest on disk.

Builds a synthetic near-duplicate corpus (tensor files plus a manifest),
then lets the pipeline do everything: validate, pool, fit the whitener,
index, and score mean average precision. The same run is reachable from
the command line as `poolrank run --manifest ... --out ...`.
"""
import json
import tempfile
from pathlib import Path

import numpy as np

from poolrank import FeatureMapStack, ROTATION_TAGS, RunConfig, run_pipeline, write_stack

rng = np.random.default_rng(3)
root = Path(tempfile.mkdtemp(prefix="poolrank_demo_"))
tensors = root / "tensors"
tensors.mkdir()

K, H, W = 16, 6, 6
SIGMA = 0.05

entries = []
img_no = 0


def add_image(role, group, base):
    """Write one image's stacks (all four rotations for references)."""
    global img_no
    image_id = f"img{img_no:03d}"
    img_no += 1
    tags = ROTATION_TAGS if role == "reference" else ("rot0",)
    views = {}
    for tag in tags:
        maps = (base + SIGMA * rng.standard_normal(base.shape)).astype(np.float32)
        p = tensors / f"{image_id}_{tag}.fms"
        write_stack(FeatureMapStack(image_id, tag, maps), p)
        views[tag] = str(p.relative_to(root))
    entry = {"id": image_id, "role": role, "views": views}
    if group:
        entry["group"] = group
    entries.append(entry)


# 5 scenes, each with a query and two near-duplicate references,
# plus 20 unrelated distractor references.
for g in range(5):
    scene = rng.standard_normal((K, H, W))
    add_image("query", f"scene{g}", scene)
    add_image("reference", f"scene{g}", scene)
    add_image("reference", f"scene{g}", scene)
for _ in range(20):
    add_image("reference", None, rng.standard_normal((K, H, W)))

manifest = root / "manifest.json"
manifest.write_text(json.dumps({"mode": "retrieval", "entries": entries}, indent=1))
print(f"corpus: {img_no} images under {root}")

config = RunConfig(manifest=str(manifest), out_dir=str(root / "run"))
report = run_pipeline(config)

print()
print("stages:")
for stage in report["stages"]:
    print(f"  {stage['stage']:12s} {stage['seconds']:.3f}s")
print()
print(f"mAP = {report['metrics']['map']:.4f} over {report['metrics']['n_queries']} queries")
print()
print("artifacts:")
for name, path in sorted(report["artifacts"].items()):
    print(f"  {name:15s} {path}")

print()
print("equivalent shell session:")
print(f"  poolrank run --manifest {manifest} --out {root / 'run'}")
print("or stage by stage:")
print(f"  poolrank pool --manifest {manifest} --strategy avg --out DESC")
print("  poolrank fit-whitener --descriptors DESC/reference --pca --out white.pwm")
print(f"  poolrank index --descriptors DESC/reference --manifest {manifest.name} \\")
print("      --model white.pwm --out index.pri")
print(f"  poolrank eval-map --index index.pri --queries DESC/query \\")
print(f"      --manifest {manifest.name} --model white.pwm")
