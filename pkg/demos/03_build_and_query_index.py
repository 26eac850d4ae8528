"""Index and query walkthrough: rotation-min ranking over a tiny corpus.

References may appear rotated relative to the query, so each reference
is indexed under up to four orientation descriptors. A query's distance
to a reference is the minimum cosine distance over those orientations:
one good orientation is enough to match.
"""
import numpy as np

from poolrank import (
    DatasetManifest,
    Descriptor,
    ManifestEntry,
    build_index,
    evaluate_map,
    query,
)

rng = np.random.default_rng(2)
DIM = 16


def desc(image_id, view, values):
    return Descriptor(image_id, view, np.asarray(values, np.float32), "avg", "none")


# Three reference images. "statue" appears in the corpus rotated: its
# rot270 descriptor is what the query will resemble.
landmark = rng.standard_normal(DIM)
statue_upright = rng.standard_normal(DIM)
statue_rotated = rng.standard_normal(DIM)
crowd = rng.standard_normal(DIM)

descriptors = [
    desc("landmark", "rot0", landmark),
    desc("statue", "rot0", statue_upright),
    desc("statue", "rot270", statue_rotated),
    desc("crowd", "rot0", crowd),
]
entries = [
    ManifestEntry("landmark", "reference", {"rot0": "-"}, "trip1", None),
    ManifestEntry("statue", "reference", {"rot0": "-"}, "trip2", None),
    ManifestEntry("crowd", "reference", {"rot0": "-"}, None, None),
    ManifestEntry("statue_phone", "query", {"rot0": "-"}, "trip2", None),
]
index = build_index(descriptors, DatasetManifest("retrieval", tuple(entries)))
print(f"indexed {len(index)} references, {index.matrix.shape[0]} orientation rows")

# The query is a noisy copy of the rotated statue shot.
q = desc("statue_phone", "rot0", statue_rotated + 0.05 * rng.standard_normal(DIM))
ranking = query(index, q)
print()
print("ranking for statue_phone:")
for rank, (image_id, distance) in enumerate(ranking.items, start=1):
    print(f"  {rank}. {image_id:10s} {distance:.4f}")
# statue wins through its rot270 row even though its upright view is
# no closer than the distractors

print()
print("statue rank:", ranking.position_of("statue"))

result = evaluate_map(index, [(q, "trip2")])
print(f"mAP over this one query: {result.map:.4f}")
