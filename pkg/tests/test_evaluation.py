"""Metric, mesh-extraction, and evaluation-report tests.

The chamfer/F-score implementation is checked against a dense
pairwise-distance oracle, the box matcher against hand-computed
generalized IoU values and the identity assignment, and mesh
extraction against analytic signed distance fields.
"""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from partrec.datagen import (Albedo, RoundedBoxField, render_truth,
                             sample_scene)
from partrec.evaluation import (Mesh, chamfer_fscore, empty_mesh,
                                evaluate_scene, extract_mesh,
                                extract_mesh_field, giou, match_parts,
                                novel_cameras, psnr, sample_surface_points,
                                summarize, write_report)
from partrec.field import FieldHeads
from partrec.formats import read_jsonl
from partrec.geometry import AABB, ContractViolation
from partrec.kinematics import ArticulationParams, MotionType
from partrec.model import PartSlotOutput


def unit_cube(cx: float, cy: float = 0.0, cz: float = 0.0) -> AABB:
    return AABB(center=(cx, cy, cz), size=(1.0, 1.0, 1.0))


class TestPsnr:
    def test_exact_match_caps_at_99(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(img, img) == 99.0

    def test_uniform_offset_is_20db(self):
        gt = np.full((16, 16, 3), 0.4)
        # mse = 0.01 -> 10 log10(100) = 20
        assert psnr(gt + 0.1, gt) == pytest.approx(20.0, abs=1e-12)

    def test_tiny_error_still_capped(self):
        gt = np.zeros((4, 4))
        assert psnr(gt + 1e-12, gt) == 99.0

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((5, 5, 3)), rng.random((5, 5, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ContractViolation):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def brute_chamfer_fscore(pred, gt, tau):
    """Dense-matrix reference for the tree-based implementation."""
    d = np.linalg.norm(pred[:, None, :] - gt[None, :, :], axis=-1)
    d_pg = d.min(axis=1)
    d_gp = d.min(axis=0)
    cd = 0.5 * (d_pg.mean() + d_gp.mean())
    p = (d_pg < tau).mean()
    r = (d_gp < tau).mean()
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return cd, f


class TestChamferFscore:
    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            n, m = rng.integers(1, 80, size=2)
            pred = rng.normal(scale=0.3, size=(n, 3))
            gt = rng.normal(scale=0.3, size=(m, 3))
            tau = float(rng.uniform(0.01, 0.6))
            cd, f = chamfer_fscore(pred, gt, tau)
            cd_ref, f_ref = brute_chamfer_fscore(pred, gt, tau)
            assert cd == pytest.approx(cd_ref, rel=1e-12)
            assert f == pytest.approx(f_ref, rel=1e-12)

    def test_identical_clouds(self):
        pts = np.random.default_rng(3).random((60, 3))
        cd, f = chamfer_fscore(pts, pts, tau=0.01)
        assert cd == 0.0
        assert f == 1.0

    def test_single_point_distance(self):
        pred = np.array([[0.0, 0.0, 0.0]])
        gt = np.array([[1.0, 0.0, 0.0]])
        cd, f = chamfer_fscore(pred, gt, tau=0.5)
        assert cd == pytest.approx(1.0)
        assert f == 0.0
        _, f_wide = chamfer_fscore(pred, gt, tau=2.0)
        assert f_wide == 1.0

    def test_zero_precision_and_recall_gives_zero_f(self):
        cd, f = chamfer_fscore(np.zeros((3, 3)), np.ones((3, 3)) * 10,
                               tau=1e-3)
        assert f == 0.0
        assert cd == pytest.approx(10 * math.sqrt(3))

    def test_empty_cloud_raises(self):
        with pytest.raises(ContractViolation):
            chamfer_fscore(np.zeros((0, 3)), np.ones((3, 3)), tau=0.1)

    def test_nonpositive_tau_raises(self):
        with pytest.raises(ContractViolation):
            chamfer_fscore(np.ones((2, 3)), np.ones((2, 3)), tau=0.0)


class TestGiou:
    def test_identical_boxes_score_one(self):
        box = AABB(center=(0.1, -0.2, 0.3), size=(0.5, 0.4, 0.8))
        assert giou(box, box) == pytest.approx(1.0)

    def test_touching_unit_cubes_score_zero(self):
        # hull equals union, intersection is empty: cost 1 - gIoU = 1
        assert giou(unit_cube(0.0), unit_cube(1.0)) == pytest.approx(0.0)

    def test_contained_box(self):
        outer = unit_cube(0.0)
        inner = AABB(center=(0, 0, 0), size=(0.5, 0.5, 0.5))
        # hull = union = 1, intersection = volume of inner = 0.125
        assert giou(outer, inner) == pytest.approx(0.125)

    def test_separated_boxes_go_negative(self):
        assert giou(unit_cube(0.0), unit_cube(5.0)) < -0.5

    @given(st.lists(st.floats(-0.4, 0.4), min_size=6, max_size=6),
           st.lists(st.floats(0.05, 0.5), min_size=6, max_size=6))
    @settings(max_examples=40, deadline=None)
    def test_symmetric_and_bounded(self, centers, sizes):
        a = AABB(center=centers[:3], size=sizes[:3])
        b = AABB(center=centers[3:], size=sizes[3:])
        g = giou(a, b)
        assert g == pytest.approx(giou(b, a), abs=1e-12)
        assert -1.0 < g <= 1.0 + 1e-12


def random_boxes(rng, n):
    return [AABB(center=rng.uniform(-0.3, 0.3, 3),
                 size=rng.uniform(0.05, 0.4, 3)) for _ in range(n)]


class TestMatchParts:
    def test_identity_on_equal_lists(self):
        boxes = random_boxes(np.random.default_rng(0), 4)
        res = match_parts(boxes, boxes)
        assert res.pairs == ((0, 0), (1, 1), (2, 2), (3, 3))
        assert res.d_giou == pytest.approx(0.0, abs=1e-12)
        assert res.d_cdist == pytest.approx(0.0, abs=1e-12)

    def test_recovers_permutation(self):
        boxes = random_boxes(np.random.default_rng(7), 5)
        perm = [3, 0, 4, 1, 2]
        res = match_parts([boxes[i] for i in perm], boxes)
        assert res.d_giou == pytest.approx(0.0, abs=1e-10)
        for row, col in res.pairs:
            assert perm[row] == col

    def test_never_beaten_by_identity_assignment(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            n = int(rng.integers(1, 6))
            pred, gt = random_boxes(rng, n), random_boxes(rng, n)
            res = match_parts(pred, gt)
            identity = np.mean([1.0 - giou(p, g) for p, g in zip(pred, gt)])
            assert res.d_giou <= identity + 1e-12

    def test_unmatched_parts_cost_two(self):
        box = unit_cube(0.0)
        res = match_parts([box, unit_cube(10.0)], [box])
        assert res.pairs == ((0, 0),)
        # one perfect match plus one unmatched, averaged over max(P, P')
        assert res.d_giou == pytest.approx((0.0 + 2.0) / 2)
        assert res.d_cdist == pytest.approx(0.0)

    def test_empty_list_raises(self):
        with pytest.raises(ContractViolation):
            match_parts([], [unit_cube(0.0)])


def fresh_field(seed=0, channels=4, res=8):
    torch.manual_seed(seed)
    heads = FieldHeads(channels).double()
    planes = torch.zeros(6, res, res, channels, dtype=torch.float64)
    return planes, heads


def static_params(center, size, n_states=2):
    return ArticulationParams(
        box=AABB(center=center, size=size), motion_type=MotionType.STATIC,
        axis=np.array([1.0, 0.0, 0.0]), pivot=np.zeros(3),
        schedule=np.zeros(n_states))


class TestMeshExtraction:
    def test_fresh_field_is_sphere_of_radius_tenth_r(self):
        planes, heads = fresh_field()
        center = (0.05, -0.02, 0.0)
        params = static_params(center, (0.3, 0.3, 0.3))
        grid_res = 40
        mesh = extract_mesh(planes, heads, params, radius=0.5,
                            grid_res=grid_res)
        assert not mesh.is_empty
        radial = np.linalg.norm(mesh.vertices - np.array(center), axis=1)
        cell = 0.3 / (grid_res - 1)
        assert np.abs(radial - 0.05).max() <= 1.5 * cell

    def test_fresh_field_color_is_mid_grey(self):
        planes, heads = fresh_field(seed=1)
        mesh = extract_mesh(planes, heads,
                            static_params((0, 0, 0), (0.25, 0.25, 0.25)),
                            radius=0.5, grid_res=24)
        assert np.allclose(mesh.colors, 0.5, atol=1e-9)

    def test_faces_index_valid_vertices(self):
        planes, heads = fresh_field(seed=2)
        mesh = extract_mesh(planes, heads,
                            static_params((0, 0, 0), (0.3, 0.2, 0.25)),
                            radius=0.5, grid_res=20)
        assert mesh.faces.min() >= 0
        assert mesh.faces.max() < len(mesh.vertices)
        assert mesh.colors.shape == mesh.vertices.shape

    def test_no_level_crossing_gives_empty_mesh(self):
        planes, heads = fresh_field()
        # box corners stay within 0.1 r of the center: SDF < 0 everywhere
        tiny = static_params((0, 0, 0), (0.04, 0.04, 0.04))
        mesh = extract_mesh(planes, heads, tiny, radius=0.5, grid_res=16)
        assert mesh.is_empty
        assert mesh.vertices.shape == (0, 3)

    def test_vertices_lie_near_analytic_surface(self):
        rb = RoundedBoxField((0.02, 0.0, -0.03), (0.15, 0.1, 0.2), 0.03,
                             Albedo(np.array([0.3, 0.5, 0.7])))
        box = AABB(center=(0.02, 0.0, -0.03), size=(0.36, 0.26, 0.46))
        mesh = extract_mesh_field(rb, box, grid_res=32)
        s = rb.query(torch.as_tensor(mesh.vertices))[0].numpy()
        max_spacing = (box.size / 31).max()
        assert np.abs(s).max() <= 0.5 * max_spacing

    def test_refinement_tightens_the_surface(self):
        rb = RoundedBoxField((0, 0, 0), (0.12, 0.18, 0.1), 0.02,
                             Albedo(np.array([0.6, 0.2, 0.2])))
        box = AABB(center=(0, 0, 0), size=(0.3, 0.42, 0.26))
        errs = []
        for grid_res in (12, 48):
            mesh = extract_mesh_field(rb, box, grid_res=grid_res)
            s = rb.query(torch.as_tensor(mesh.vertices))[0].numpy()
            errs.append(np.abs(s).mean())
        assert errs[1] < errs[0]

    def test_flat_albedo_colors_extracted_mesh(self):
        rgb = np.array([0.3, 0.5, 0.7])
        rb = RoundedBoxField((0, 0, 0), (0.1, 0.1, 0.1), 0.02, Albedo(rgb))
        mesh = extract_mesh_field(rb, AABB(center=(0, 0, 0),
                                           size=(0.26, 0.26, 0.26)), 20)
        assert np.allclose(mesh.colors, rgb, atol=1e-9)

    def test_coarse_grid_raises(self):
        planes, heads = fresh_field()
        with pytest.raises(ContractViolation):
            extract_mesh(planes, heads,
                         static_params((0, 0, 0), (0.3, 0.3, 0.3)),
                         radius=0.5, grid_res=4)


class TestSampleSurfacePoints:
    def triangle_mesh(self):
        verts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1.0, 0]])
        faces = np.array([[0, 1, 2]])
        return Mesh(vertices=verts, faces=faces, colors=np.zeros((3, 3)))

    def test_shape_and_determinism(self):
        mesh = self.triangle_mesh()
        a = sample_surface_points(mesh, 500, seed=9)
        b = sample_surface_points(mesh, 500, seed=9)
        c = sample_surface_points(mesh, 500, seed=10)
        assert a.shape == (500, 3)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_points_stay_on_the_triangle(self):
        pts = sample_surface_points(self.triangle_mesh(), 2000, seed=0)
        assert np.all(np.abs(pts[:, 2]) < 1e-12)
        assert np.all(pts[:, 0] >= -1e-12)
        assert np.all(pts[:, 1] >= -1e-12)
        assert np.all(pts[:, 0] + pts[:, 1] <= 1 + 1e-12)

    def test_sampling_is_area_weighted(self):
        # second triangle has 1% of the area and sits at x >= 10
        verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0],
                          [10.0, 0, 0], [10.1, 0, 0], [10, 0.1, 0]])
        faces = np.array([[0, 1, 2], [3, 4, 5]])
        mesh = Mesh(vertices=verts, faces=faces, colors=np.zeros((6, 3)))
        pts = sample_surface_points(mesh, 10000, seed=4)
        frac_small = (pts[:, 0] > 5).mean()
        assert 0.002 < frac_small < 0.03

    def test_empty_mesh_raises(self):
        with pytest.raises(ContractViolation):
            sample_surface_points(empty_mesh(), 10)


class TestNovelCameras:
    def azimuth(self, cam) -> float:
        pos = cam.pose[:3, 3]
        return math.atan2(pos[0], -pos[2]) % (2 * math.pi)

    def test_disjoint_from_training_azimuths(self):
        scene = sample_scene("drawer-chest", seed=0, n_views=4, resolution=16)
        novel = novel_cameras(scene, n=8)
        assert len(novel) == 8
        train_az = [self.azimuth(c) for c in scene.cameras[0]]
        for cam in novel:
            az = self.azimuth(cam)
            gaps = [min(abs(az - t), 2 * math.pi - abs(az - t))
                    for t in train_az]
            assert min(gaps) > 0.05

    def test_same_rig_sphere_and_resolution(self):
        scene = sample_scene("door-cabinet", seed=3, n_views=4, resolution=24)
        train_d = np.linalg.norm(scene.cameras[0][0].pose[:3, 3])
        for cam in novel_cameras(scene, n=8):
            assert np.linalg.norm(cam.pose[:3, 3]) == pytest.approx(train_d)
            assert cam.width == 24 and cam.height == 24


def logit(p):
    return np.log(p) - np.log1p(-p)


def raw_for(params: ArticulationParams, radius: float) -> np.ndarray:
    """Head output whose decoding reproduces the given articulation."""
    c = logit((params.box.center + radius) / (2 * radius))
    s = logit(params.box.size / (2 * radius))
    if params.motion_type is MotionType.REVOLUTE:
        logits = np.array([-8.0, 8.0])
    else:
        logits = np.array([8.0, -8.0])
    pv = logit((params.pivot + radius) / (2 * radius))
    sched = logit((params.schedule + 1) / 2)
    return np.concatenate([c, s, logits, params.axis, pv, sched])


@pytest.fixture(scope="module")
def scene():
    truth = sample_scene("drawer-chest", seed=5, parts=2, n_views=2,
                         resolution=16, states=2)
    return render_truth(truth, n_samples=32)


@pytest.fixture(scope="module")
def record(scene):
    preds = []
    for i, part in enumerate(scene.parts):
        planes, heads = fresh_field(seed=i)
        raw = raw_for(part.articulation, scene.frame.radius)
        preds.append(PartSlotOutput(
            planes=planes, heads=heads,
            raw_articulation=torch.as_tensor(raw)))
    return evaluate_scene(preds, scene, n_novel=4, n_samples=24,
                          grid_res=24, n_points=1500)


class TestEvaluateScene:
    def test_articulation_metrics_vanish_for_exact_raws(self, record):
        assert record["type_accuracy"] == 1.0
        assert record["axis_deg"] == pytest.approx(0.0, abs=1e-6)
        assert record["pivot_err"] == pytest.approx(0.0, abs=1e-9)
        assert record["dyn_err"] == pytest.approx(0.0, abs=1e-9)

    def test_box_match_is_exact(self, record):
        assert record["d_giou"] == pytest.approx(0.0, abs=1e-9)
        assert record["d_cdist"] == pytest.approx(0.0, abs=1e-9)
        assert record["matches"] == [[0, 0], [1, 1]]

    def test_geometry_differs_from_truth(self, record):
        # predictions carry the fresh spherical geometry, not the boxes
        assert record["empty_parts"] == 0
        assert record["chamfer"] > 0.01
        assert 0.0 <= record["fscore"] < 1.0

    def test_psnr_is_finite_and_plausible(self, record):
        assert 5.0 < record["psnr"] < 99.0

    def test_record_is_json_ready(self, record):
        import json
        text = json.dumps(record)
        assert "drawer-chest" in text
        for key in ("psnr", "chamfer", "fscore", "d_giou", "d_cdist",
                    "type_accuracy", "axis_deg", "pivot_err", "dyn_err"):
            assert isinstance(record[key], float)

    def test_missing_images_raises(self):
        bare = sample_scene("drawer-chest", seed=5, parts=2, n_views=2,
                            resolution=16)
        with pytest.raises(ContractViolation):
            evaluate_scene([], bare)


class TestReport:
    def fake_record(self, i):
        rec = {"template": "chest", "seed": i, "parts": 2,
               "matches": [[0, 0]], "empty_parts": 0}
        for k, v in (("psnr", 20.0 + i), ("chamfer", 0.01 * i),
                     ("fscore", 0.5), ("d_giou", 0.1), ("d_cdist", 0.02),
                     ("type_accuracy", 1.0), ("axis_deg", 2.0 * i),
                     ("pivot_err", 0.01), ("dyn_err", 0.005)):
            rec[k] = v
        return rec

    def test_roundtrip_and_summary(self, tmp_path):
        records = [self.fake_record(i) for i in range(3)]
        path = tmp_path / "report.jsonl"
        summary = write_report(records, path)
        lines = read_jsonl(path)
        assert len(lines) == 4
        assert lines[:3] == records
        assert lines[3] == summary
        assert summary["record"] == "summary"
        assert summary["scenes"] == 3
        assert summary["psnr"] == pytest.approx(21.0)
        assert summary["axis_deg"] == pytest.approx(2.0)

    def test_empty_records_raise(self):
        with pytest.raises(ContractViolation):
            summarize([])
