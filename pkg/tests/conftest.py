import json
import sys

import numpy as np
import pytest
import torch

from unicon.data import write_mask, write_slice

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_volume_files(root, vid, Z=4, H=16, W=20, annotated=(1, 2), age=0, seed=0):
    rng = np.random.default_rng(seed)
    slices = []
    for z in range(Z):
        p = root / vid / f"img_{z:04d}.png"
        write_slice(rng.random((H, W)), p)
        slices.append(f"{vid}/img_{z:04d}.png")
    ann = []
    for z in annotated:
        p = root / vid / f"mask_{z:04d}.png"
        write_mask((rng.random((H, W)) > 0.5).astype(np.uint8), p)
        ann.append({"z": z, "mask": f"{vid}/mask_{z:04d}.png"})
    return {
        "volume_id": vid,
        "age_index": age,
        "cohort_tag": "C57",
        "shape": [Z, H, W],
        "slice_paths": slices,
        "annotated_slices": ann,
    }


@pytest.fixture
def small_manifest(tmp_path):
    vols = [make_volume_files(tmp_path, f"v{i}", age=i, seed=i) for i in range(2)]
    path = tmp_path / "train.json"
    path.write_text(json.dumps({"name": "tiny", "split": "train", "volumes": vols}))
    return path


@pytest.fixture(scope="session")
def tiny_phantom(tmp_path_factory):
    """Four 16x32x32 phantoms (one per age) with two annotated slices each."""
    from unicon.phantom import generate_cohort

    root = tmp_path_factory.mktemp("tiny_phantom")
    return generate_cohort(
        root, 1, seed=0, annotated_fraction=0.125, test_annotated_fraction=0.125, Z=16, H=32, W=32, hole_block=4
    )


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
