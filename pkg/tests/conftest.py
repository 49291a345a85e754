"""Shared fixtures: a miniature weight bundle, a synthetic benchmark tree,
and recorded replay fixtures, so the full pipeline runs with no pretrained
weights. Also prints one line per acceptance criterion at the end of a run
that included the acceptance module."""

import numpy as np
import pytest
from PIL import Image

from hierseg.weights import make_toy_bundle


@pytest.fixture(scope="session")
def toy_weights_root(tmp_path_factory):
    """Weights root containing a complete 'toy' bundle."""
    root = tmp_path_factory.mktemp("weights")
    make_toy_bundle(root / "toy", seed=0)
    return root


def build_voc_tree(root, ids, size=(12, 10), fg_classes=(1, 2), seed=0):
    """VOC-layout tree whose masks use a couple of foreground classes."""
    rng = np.random.default_rng(seed)
    (root / "JPEGImages").mkdir(parents=True)
    (root / "SegmentationClass").mkdir(parents=True)
    lists = root / "ImageSets" / "Segmentation"
    lists.mkdir(parents=True)
    for sid in ids:
        img = rng.integers(0, 256, size=(*size, 3), dtype=np.uint8)
        Image.fromarray(img).save(root / "JPEGImages" / f"{sid}.jpg")
        mask = rng.choice([0, *fg_classes], size=size).astype(np.uint8)
        mask[0, :] = 255
        Image.fromarray(mask, mode="L").save(root / "SegmentationClass" / f"{sid}.png")
    (lists / "val.txt").write_text("\n".join(ids) + "\n")
    return root


@pytest.fixture(scope="session")
def voc_tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("voc")
    ids = [f"img{i:02d}" for i in range(5)]
    build_voc_tree(root, ids)
    return root, ids


def write_replay_fixtures(scores_dir, sd_dir, ids, num_categories=20,
                          grid=(2, 2), sd_side=2, seed=0, identity_sd=True):
    """Recorded coarse scores plus diffusion attention per image id."""
    from hierseg.diffusion import attention_from_maps, save_sd_attention
    from hierseg.fixtures import save_fixture

    rng = np.random.default_rng(seed)
    scores_dir.mkdir(parents=True, exist_ok=True)
    sd_dir.mkdir(parents=True, exist_ok=True)
    tokens = sd_side * sd_side
    for sid in ids:
        scores = rng.standard_normal((*grid, num_categories)).astype(np.float32)
        save_fixture(scores_dir / f"{sid}.npz", {"scores": scores},
                     {"kind": "similarity"})
        if identity_sd:
            maps = np.eye(tokens)[None, :, :]
        else:
            maps = rng.random((2, tokens, tokens)) + 1e-3
            maps /= maps.sum(axis=2, keepdims=True)
        att = attention_from_maps(maps)
        save_sd_attention(sd_dir / f"{sid}.npz", att)


@pytest.fixture(scope="session")
def replay_dirs(tmp_path_factory, voc_tree):
    _, ids = voc_tree
    base = tmp_path_factory.mktemp("replay")
    scores = base / "scores"
    sd = base / "sd"
    write_replay_fixtures(scores, sd, ids)
    return scores, sd


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = {}
    for status in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" not in nodeid:
                continue
            name = nodeid.split("::")[-1]
            # A test is failed if any phase failed; skipped only if never run.
            if status == "failed" or rows.get(name) != "failed":
                rows[name] = status
    if rows:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name in sorted(rows):
            terminalreporter.write_line(f"[{rows[name].upper()}] {name}")
