import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from skelforge.dataset import (
    MissingArtifactError,
    build_gt_volume,
    classify_curve_sheet,
    generate_dataset,
    generate_shape,
    load_sample,
    read_split,
    save_sample,
    sink_to_skeleton,
    write_split,
)
from skelforge.dataset.shapes import validate_params
from skelforge.geometry import GeometryError, Label, PointSet, euler_characteristic, genus, marching_cubes, points_inside, sample_surface


@pytest.fixture(scope="module")
def torus():
    return generate_shape("torus", {"R": 0.3, "rho": 0.1}, seed=0)


# -- sinking ---------------------------------------------------------------------
def test_sink_parallel_planes_reach_midplane():
    g = np.linspace(-0.5, 0.5, 41)
    x, y = np.meshgrid(g, g)
    n = x.size
    pts = np.concatenate([np.c_[x.ravel(), y.ravel(), np.full(n, 0.1)], np.c_[x.ravel(), y.ravel(), np.full(n, -0.1)]])
    nrm = np.concatenate([np.tile([0, 0, 1.0], (n, 1)), np.tile([0, 0, -1.0], (n, 1))])
    for step in (0.003, 0.007, 0.013):
        sunk = sink_to_skeleton(PointSet(pts, nrm), 100, step)
        assert np.abs(sunk.points[:, 2]).max() <= step


def test_sink_sphere_clusters_at_centre():
    s = generate_shape("sphere", {"radius": 0.4}, seed=0)
    sunk = sink_to_skeleton(sample_surface(s.mesh, 2000, 0), steps=200, step_size=0.005)
    assert np.linalg.norm(sunk.points, axis=1).mean() < 0.1


def test_sink_torus_reaches_ring_and_stays_inside(torus):
    sunk = sink_to_skeleton(torus.gt_surface, 100, 0.005)
    ring = np.linalg.norm(sunk.points[:, [0, 2]], axis=1)
    assert np.abs(ring - 0.3).mean() < 0.01
    assert points_inside(torus.mesh, sunk.points).all()


def test_sink_zero_steps_is_identity(torus):
    assert np.array_equal(sink_to_skeleton(torus.gt_surface, 0, 0.01).points, torus.gt_surface.points)


def test_sink_needs_normals():
    with pytest.raises(GeometryError):
        sink_to_skeleton(PointSet(np.zeros((3, 3))), 5, 0.01)


# -- classification ------------------------------------------------------------------
def test_collinear_points_are_curves():
    pts = np.c_[np.linspace(-0.4, 0.4, 32), np.zeros(32), np.zeros(32)]
    assert np.all(classify_curve_sheet(PointSet(pts)) == Label.CURVE)


def test_planar_grid_interior_is_sheet():
    g = np.linspace(-0.3, 0.3, 15)
    x, z = np.meshgrid(g, g)
    pts = np.c_[x.ravel(), np.zeros(x.size), z.ravel()]
    lab = classify_curve_sheet(PointSet(pts))
    interior = (np.abs(pts[:, 0]) < 0.2) & (np.abs(pts[:, 2]) < 0.2)
    assert np.all(lab[interior] == Label.SHEET)


def _line_welded_to_plane(seed):
    rng = np.random.default_rng(seed)
    g = np.linspace(-0.2, 0.2, 6)
    x, z = np.meshgrid(g, g)
    plane = np.c_[x.ravel(), np.zeros(x.size), z.ravel()]
    line = np.c_[np.zeros(28), np.linspace(0.05, 0.4, 28), np.zeros(28)]
    return np.concatenate([plane, line]) + rng.normal(scale=1e-3, size=(64, 3))


def test_mixed_shape_matches_pca_oracle():
    pts = _line_welded_to_plane(0)
    assert np.array_equal(classify_curve_sheet(PointSet(pts)), oracles.classify(pts))


def test_classify_errors():
    with pytest.raises(GeometryError):
        classify_curve_sheet(PointSet(np.zeros((10, 3))), k=16)
    with pytest.raises(GeometryError):
        classify_curve_sheet(PointSet(np.random.default_rng(0).random((10, 3))), k=3)


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_classification_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    pts = _line_welded_to_plane(seed)
    rot = _random_rotation(rng)
    moved = pts @ rot.T + rng.uniform(-0.05, 0.05, 3)
    assert np.array_equal(classify_curve_sheet(PointSet(pts)), classify_curve_sheet(PointSet(moved)))


# -- volumes ------------------------------------------------------------------------
def test_volume_single_point():
    v = build_gt_volume(PointSet(np.zeros((1, 3))), 64, 1)
    assert v.values.sum() == 7
    assert set(np.unique(v.values)) <= {0.0, 1.0}


def test_volume_fills_closed_shell():
    # points on the faces of a cube of side 0.5 voxelised at r = 16
    g = np.linspace(-0.25, 0.25, 60)
    a, b = np.meshgrid(g, g)
    a, b = a.ravel(), b.ravel()
    faces = []
    for axis in range(3):
        for s in (-0.25, 0.25):
            p = np.zeros((a.size, 3))
            others = [k for k in range(3) if k != axis]
            p[:, axis] = s
            p[:, others[0]], p[:, others[1]] = a, b
            faces.append(p)
    shell = PointSet(np.concatenate(faces))
    vol = build_gt_volume(shell, 16, 0)
    occ = vol.values.astype(bool)
    assert occ[8, 8, 8]
    assert np.array_equal(vol.values, oracles.fill_interior(vol.values))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 2))
def test_volume_monotone_in_radius(seed, r0):
    pts = np.random.default_rng(seed).uniform(-0.45, 0.45, (12, 3))
    small = build_gt_volume(PointSet(pts), 16, r0).values
    large = build_gt_volume(PointSet(pts), 16, r0 + 1).values
    assert np.all(large >= small)


# -- shapes -------------------------------------------------------------------------
def test_torus_shape(torus):
    assert genus(torus.mesh) == 1
    assert euler_characteristic(marching_cubes(torus.gt_volume)) == 0
    assert np.all(torus.gt_skeleton.labels == Label.CURVE)


def test_sphere_shape():
    s = generate_shape("sphere", seed=2)
    assert genus(s.mesh) == 0
    assert np.linalg.norm(s.gt_skeleton.points, axis=1).max() < 0.02
    assert euler_characteristic(marching_cubes(s.gt_volume)) == 2


def test_box_frame_labels_away_from_corners():
    s = generate_shape("box_frame", seed=0)
    a = s.params["half_size"]
    lab = classify_curve_sheet(s.gt_skeleton)
    corner = np.linalg.norm(np.abs(s.gt_skeleton.points) - a, axis=1)
    assert np.all(s.gt_skeleton.labels == Label.CURVE)
    assert np.all(lab[corner > 0.03] == Label.CURVE)
    assert genus(s.mesh) == 5


def test_table_split_is_a_partition():
    s = generate_shape("table", seed=0)
    cur, sur = s.gt_skeleton.split()
    assert len(cur) + len(sur) == len(s.gt_skeleton) and len(cur) and len(sur)
    assert genus(s.mesh) == 0
    lab = classify_curve_sheet(s.gt_skeleton)
    sheet_inner = (s.gt_skeleton.labels == Label.SHEET)
    pts = s.gt_skeleton.points
    legs_far = (s.gt_skeleton.labels == Label.CURVE) & (pts[:, 1] < s.params["top_y"] - 0.1)
    assert np.mean(lab[sheet_inner] == Label.SHEET) > 0.95
    assert np.all(lab[legs_far] == Label.CURVE)


@pytest.mark.parametrize("kind", ["torus", "box_frame", "table", "sphere"])
def test_shapes_deterministic_watertight_in_cube(kind):
    a = generate_shape(kind, seed=7, n_views=2)
    b = generate_shape(kind, seed=7, n_views=2)
    assert a.mesh.is_watertight()
    assert np.array_equal(a.mesh.vertices, b.mesh.vertices)
    assert np.array_equal(a.views[1][0], b.views[1][0])
    assert np.array_equal(a.gt_surface.points, b.gt_surface.points)
    for geo in (a.mesh.vertices, a.gt_skeleton.points, a.gt_surface.points):
        assert np.abs(geo).max() <= 0.5
    img = a.views[0][0]
    assert img.shape == (64, 64, 3) and 0.0 <= img.min() and img.max() <= 1.0
    # object is visible but does not fill the frame
    assert 0.05 < np.mean(img.min(axis=2) < 1.0) < 0.9


@pytest.mark.parametrize(
    "kind,params",
    [("torus", {"R": 0.1}), ("torus", {"R": 0.35, "rho": 0.14}), ("sphere", {"radius": 0.6}), ("box_frame", {"bar": 0.2}), ("table", {"legs": 9}), ("torus", {"bogus": 1})],
)
def test_invalid_params(kind, params):
    with pytest.raises(GeometryError):
        validate_params(kind, params)


def test_unknown_kind():
    with pytest.raises(GeometryError):
        generate_shape("teapot")


# -- store --------------------------------------------------------------------------
def test_sample_round_trip(tmp_path, torus):
    save_sample(torus, tmp_path / "s")
    back = load_sample(tmp_path / "s")
    assert np.array_equal(back.gt_volume.values, torus.gt_volume.values)
    assert np.array_equal(back.gt_skeleton.labels, torus.gt_skeleton.labels)
    assert np.allclose(back.views[0][0], torus.views[0][0], atol=1e-7)
    assert np.allclose(back.views[0][1].rotation, torus.views[0][1].rotation)
    assert back.kind == "torus" and back.params == torus.params


def test_split_manifest(tmp_path):
    samples = generate_dataset(kinds=("torus", "sphere"), per_kind=2, seed=1, n_views=1)
    write_split(tmp_path, "train", samples)
    lines = (tmp_path / "train.jsonl").read_text().splitlines()
    assert len(lines) == 4
    back = read_split(tmp_path, "train")
    assert [s.name for s in back] == [s.name for s in samples]
    with pytest.raises(MissingArtifactError):
        read_split(tmp_path, "val")
