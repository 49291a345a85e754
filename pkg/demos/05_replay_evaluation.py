"""Run the full evaluation protocol with no pretrained weights.

Builds a throwaway five-image benchmark in the VOC directory layout plus a
replay directory of recorded score fixtures, then drives the command-line
``eval`` twice from the same run manifest and verifies the reports are
byte-identical.

    python demos/05_replay_evaluation.py
"""

import json
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from hierseg.cli import main as hierseg_main
from hierseg.fixtures import save_fixture

rng = np.random.default_rng(4)
base = Path(tempfile.mkdtemp(prefix="hierseg_demo_"))
print(f"working under {base}")

# A miniature benchmark in the standard VOC layout.
voc = base / "voc"
(voc / "JPEGImages").mkdir(parents=True)
(voc / "SegmentationClass").mkdir(parents=True)
(voc / "ImageSets" / "Segmentation").mkdir(parents=True)
ids = [f"demo{i}" for i in range(5)]
for sid in ids:
    img = rng.integers(0, 256, size=(20, 24, 3), dtype=np.uint8)
    Image.fromarray(img).save(voc / "JPEGImages" / f"{sid}.jpg")
    mask = rng.choice([0, 1, 2], size=(20, 24)).astype(np.uint8)
    Image.fromarray(mask, mode="L").save(voc / "SegmentationClass" / f"{sid}.png")
(voc / "ImageSets" / "Segmentation" / "val.txt").write_text("\n".join(ids))

# Recorded coarse scores, one fixture per image (VOC has 20 foreground
# classes, so 20 score columns).
scores_dir = base / "replay_scores"
scores_dir.mkdir()
for sid in ids:
    scores = rng.standard_normal((5, 6, 20)).astype(np.float32)
    save_fixture(scores_dir / f"{sid}.npz", {"scores": scores},
                 {"kind": "similarity"})

run1 = base / "run1"
rc = hierseg_main([
    "eval",
    "--set", "dataset.id=voc",
    "--set", f"dataset.root={voc}",
    "--set", f"replay.scores_dir={scores_dir}",
    "--no-compensation",
    "--out", str(run1),
])
assert rc == 0
report = json.loads((run1 / "report.json").read_text())
print(f"\nfirst run: miou {report['miou']:.4f} over {report['num_images']} images")

# Replaying from the recorded manifest must reproduce the report exactly.
run2, run3 = base / "run2", base / "run3"
for out in (run2, run3):
    rc = hierseg_main(["eval", "--manifest", str(run1 / "manifest.json"),
                       "--out", str(out)])
    assert rc == 0
identical = (run2 / "report.json").read_bytes() == (run3 / "report.json").read_bytes()
print(f"manifest replays byte-identical: {identical}")
print(f"inspect the artifacts under {base}")
