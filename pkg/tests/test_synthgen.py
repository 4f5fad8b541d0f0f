import numpy as np
import pytest

from uniabg.errors import ValidationError
from uniabg.evalkit import association_accuracy, view_probe
from uniabg.feature_store import read_manifest, read_vector_file
from uniabg.hgfc import cosine_similarity_matrix, greedy_associate
from uniabg.apv import read_ppm
from uniabg.synthgen import SynthConfig, gap_metric, generate, write_dataset

import oracles

# frozen from oracles.loop_gap_metric, default config, gap in {0, 0.5, 1, 2}
FROZEN_GAP = {
    0: (-0.8645053878224118, -0.6161196409933825, -0.2761235955415182, 0.029896467806956206),
    1: (-0.8689238273416222, -0.630935386331616, -0.300563411923812, 0.0011541280601582438),
    2: (-0.8666573157081267, -0.6071843644152961, -0.2530504346499831, 0.07109734685514202),
    3: (-0.8729812169413743, -0.6215896721377993, -0.26113772176267624, 0.07816483956329179),
    4: (-0.8596171894812592, -0.5852254113520711, -0.21043586542632586, 0.12777514423951342),
}
GAPS = (0.0, 0.5, 1.0, 2.0)


def _classes(ds):
    cls_of = {e.id: e.class_id for e in ds.manifest.entries}
    return [cls_of[i] for i in ds.drone.ids], [cls_of[i] for i in ds.satellite.ids]


def test_shapes_and_ids():
    ds = generate(SynthConfig(num_classes=3, drones_per_class=2, sats_per_class=2, dim=5))
    assert ds.drone.vectors.shape == (6, 5) and ds.satellite.count == 6 and ds.apv.count == 6
    assert ds.drone.ids[:3] == ("d0000_00", "d0000_01", "d0001_00")
    assert ds.apv.ids[0] == "d0000_00#apv"
    assert ds.satellite.ids[1] == "s0000_01"
    np.testing.assert_allclose(np.linalg.norm(ds.apv.vectors, axis=1), 1.0, atol=1e-12)


def test_deterministic():
    a, b = generate(SynthConfig(seed=7, emit_images=True, num_classes=4)), generate(SynthConfig(seed=7, emit_images=True, num_classes=4))
    for x, y in ((a.drone, b.drone), (a.satellite, b.satellite), (a.apv, b.apv)):
        np.testing.assert_array_equal(x.vectors, y.vectors)
    assert all(np.array_equal(a.images[k].pixels, b.images[k].pixels) for k in a.images)
    assert not np.array_equal(a.drone.vectors, generate(SynthConfig(seed=8, num_classes=4)).drone.vectors)


def test_invalid_config():
    with pytest.raises(ValidationError):
        SynthConfig(num_classes=0)
    with pytest.raises(ValidationError):
        SynthConfig(gap_strength=-1.0)


def test_zero_gap_greedy_is_perfect():
    ds = generate(SynthConfig(gap_strength=0.0, noise_sigma=0.0))
    d_cls, s_cls = _classes(ds)
    np.testing.assert_allclose(ds.drone.vectors, ds.satellite.vectors[np.asarray(d_cls)], atol=1e-15)
    assoc = greedy_associate(cosine_similarity_matrix(ds.drone, ds.satellite), sat_labels=np.arange(ds.satellite.count), drone_ids=ds.drone.ids, sat_ids=ds.satellite.ids)
    truth = dict(zip(ds.drone.ids, d_cls))
    assert association_accuracy(assoc, truth, np.arange(ds.satellite.count), s_cls)["accuracy"] == 1.0
    assert gap_metric(ds.drone, ds.satellite, ds.manifest) <= 0


@pytest.mark.parametrize("seed", range(5))
def test_raw_views_are_separable(seed):
    ds = generate(SynthConfig(seed=seed))
    assert view_probe([ds.drone, ds.satellite, ds.apv], seed) > 0.9


def test_gap_metric_matches_loop_oracle():
    ds = generate(SynthConfig(num_classes=6, drones_per_class=3, sats_per_class=2, dim=8, seed=2))
    d_cls, s_cls = _classes(ds)
    want = oracles.loop_gap_metric(ds.drone.vectors, d_cls, ds.satellite.vectors, s_cls)
    assert abs(gap_metric(ds.drone, ds.satellite, ds.manifest) - want) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_gap_metric_frozen_and_increasing(seed):
    vals = []
    for g in GAPS:
        ds = generate(SynthConfig(seed=seed, gap_strength=g))
        vals.append(gap_metric(ds.drone, ds.satellite, ds.manifest))
    np.testing.assert_allclose(vals, FROZEN_GAP[seed], atol=1e-9, rtol=0)
    assert all(a < b for a, b in zip(vals, vals[1:]))
    again = generate(SynthConfig(seed=seed))
    assert vals[-1] == gap_metric(again.drone, again.satellite, again.manifest)


def test_gap_metric_errors():
    ds = generate(SynthConfig(num_classes=3, drones_per_class=2))
    with pytest.raises(ValueError):
        gap_metric(ds.drone, ds.satellite, type(ds.manifest)([]))


def test_write_dataset(tmp_path):
    ds = generate(SynthConfig(num_classes=3, drones_per_class=2, dim=4, emit_images=True))
    paths = write_dataset(ds, tmp_path)
    back = read_vector_file(paths["drone"])
    np.testing.assert_allclose(back.vectors, ds.drone.vectors, atol=1e-6)
    man = read_manifest(paths["manifest"])
    assert len(man.entries) == 6 + 3 + 6
    img = next(e for e in man.entries if e.image_path)
    assert read_ppm(tmp_path / img.image_path).pixels.shape == (32, 32, 3)
