import numpy as np
import pytest


from tractparc import tract
from tractparc.tract import (
    ClusterModel,
    StreamlineSet,
    TckFormatError,
    assign_clusters,
    cluster_streamlines,
    filter_by_mask,
    load_cluster_model,
    load_tck,
    pairwise_distance_matrix,
    resample_streamline,
    save_cluster_model,
    save_tck,
    streamline_distance,
)
from tractparc.volio import Mask


def make_mask(shape=(10, 10, 10), voxels=(), spacing=(1.0, 1.0, 1.0)):
    data = np.zeros(shape, dtype=np.uint8)
    for v in voxels:
        data[v] = 1
    return Mask(data=data, spacing=spacing)


def write_manual_tck(path, tracks, datatype="Float32LE", terminator=True):
    dtype = "<f4" if datatype.endswith("LE") else ">f4"
    lines = ["mrtrix tracks", f"datatype: {datatype}", f"count: {len(tracks)}"]
    offset = 0
    for _ in range(4):
        text = "\n".join(lines + [f"file: . {offset}", "END"]) + "\n"
        if len(text.encode()) == offset:
            break
        offset = len(text.encode())
    chunks = [text.encode()]
    for i, t in enumerate(tracks):
        chunks.append(np.asarray(t, dtype=dtype).tobytes())
        if i < len(tracks) - 1:
            chunks.append(np.full(3, np.nan, dtype=dtype).tobytes())
    if terminator:
        chunks.append(np.full(3, np.inf, dtype=dtype).tobytes())
    path.write_bytes(b"".join(chunks))


class TestTckIO:
    def test_two_tracks_three_points(self, tmp_path):
        tracks = [np.arange(9, dtype=float).reshape(3, 3), np.arange(9, 18, dtype=float).reshape(3, 3)]
        path = tmp_path / "two.tck"
        write_manual_tck(path, tracks)
        ss = load_tck(path)
        assert len(ss) == 2
        for got, want in zip(ss.streamlines, tracks):
            np.testing.assert_allclose(got, want)

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(21)
        tracks = [rng.normal(size=(rng.integers(2, 9), 3)) * 40 for _ in range(12)]
        path = tmp_path / "rt.tck"
        save_tck(StreamlineSet(streamlines=tracks, subject_id="x"), path)
        back = load_tck(path)
        assert len(back) == len(tracks)
        for got, want in zip(back.streamlines, tracks):
            np.testing.assert_allclose(got, want.astype(np.float32), rtol=0, atol=0)

    def test_big_endian_body(self, tmp_path):
        tracks = [np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])]
        path = tmp_path / "be.tck"
        write_manual_tck(path, tracks, datatype="Float32BE")
        back = load_tck(path)
        np.testing.assert_allclose(back.streamlines[0], tracks[0])

    def test_missing_terminator(self, tmp_path):
        path = tmp_path / "noterm.tck"
        write_manual_tck(path, [np.zeros((2, 3)) + 1], terminator=False)
        with pytest.raises(TckFormatError, match="terminator"):
            load_tck(path)

    def test_missing_magic(self, tmp_path):
        path = tmp_path / "bad.tck"
        path.write_bytes(b"not a tck file\nEND\n")
        with pytest.raises(TckFormatError, match="mrtrix tracks"):
            load_tck(path)

    def test_unsupported_datatype(self, tmp_path):
        path = tmp_path / "f64.tck"
        text = "mrtrix tracks\ndatatype: Float64LE\nfile: . 60\nEND\n"
        path.write_bytes(text.encode().ljust(60, b"\x00") + np.full(3, np.inf, dtype="<f8").tobytes())
        with pytest.raises(TckFormatError, match="datatype"):
            load_tck(path)

    def test_truncated_body(self, tmp_path):
        path = tmp_path / "trunc.tck"
        write_manual_tck(path, [np.ones((3, 3))])
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(TckFormatError, match="truncated"):
            load_tck(path)

    def test_model_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        medoids = [rng.normal(size=(7, 3)) for _ in range(3)]
        model = ClusterModel(medoids=medoids, point_count=7, seed=42)
        save_cluster_model(model, tmp_path / "m.tck", tmp_path / "m.json")
        back = load_cluster_model(tmp_path / "m.tck", tmp_path / "m.json")
        assert back.k == 3 and back.point_count == 7 and back.seed == 42
        for got, want in zip(back.medoids, medoids):
            np.testing.assert_allclose(got, want.astype(np.float32))


def segment_crosses_voxel(p0, p1, voxel):
    """Exact segment-AABB intersection (slab method), voxel-center convention."""
    lo = np.asarray(voxel, dtype=float) - 0.5
    hi = lo + 1.0
    d = p1 - p0
    t0, t1 = 0.0, 1.0
    for axis in range(3):
        if abs(d[axis]) < 1e-300:
            if p0[axis] < lo[axis] or p0[axis] > hi[axis]:
                return False
            continue
        ta = (lo[axis] - p0[axis]) / d[axis]
        tb = (hi[axis] - p0[axis]) / d[axis]
        t0 = max(t0, min(ta, tb))
        t1 = min(t1, max(ta, tb))
    return t0 <= t1


class TestFilterByMask:
    def test_through_center_retained(self):
        mask = make_mask(voxels=[(5, 5, 5)])
        ss = StreamlineSet(streamlines=[np.array([[5.0, 5.0, 0.0], [5.0, 5.0, 9.0]])])
        assert len(filter_by_mask(ss, mask)) == 1

    def test_outside_bbox_removed(self):
        mask = make_mask(voxels=[(5, 5, 5)])
        ss = StreamlineSet(streamlines=[np.array([[20.0, 20.0, 20.0], [30.0, 20.0, 20.0]])])
        assert len(filter_by_mask(ss, mask)) == 0

    def test_straddling_segment_retained_by_supersampling(self):
        mask = make_mask(voxels=[(5, 5, 5)])
        # both vertices outside the voxel cube, segment crosses it
        p0, p1 = np.array([5.0, 5.0, 3.4]), np.array([5.0, 5.0, 6.6])
        assert segment_crosses_voxel(p0, p1, (5, 5, 5))
        ss = StreamlineSet(streamlines=[np.stack([p0, p1])])
        assert len(filter_by_mask(ss, mask)) == 1

    def test_empty_mask_warns(self):
        mask = make_mask()
        ss = StreamlineSet(streamlines=[np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])])
        with pytest.warns(UserWarning, match="empty"):
            out = filter_by_mask(ss, mask)
        assert len(out) == 0

    def test_subset_and_idempotent(self):
        rng = np.random.default_rng(3)
        mask = make_mask(voxels=[(4, 4, 4), (5, 4, 4), (6, 6, 6)])
        streams = [rng.uniform(0, 10, size=(4, 3)) for _ in range(30)]
        ss = StreamlineSet(streamlines=streams)
        once = filter_by_mask(ss, mask)
        twice = filter_by_mask(once, mask)
        assert 0 < len(once) <= len(ss)
        assert len(twice) == len(once)
        for s in once.streamlines:
            assert any(np.array_equal(s, t) for t in ss.streamlines)

    def test_supersampling_agrees_with_analytic_oracle_on_axis_lines(self):
        rng = np.random.default_rng(17)
        voxels = [tuple(v) for v in rng.integers(0, 10, size=(40, 3))]
        mask = make_mask(voxels=voxels)
        streams = []
        for _ in range(60):
            axis = rng.integers(0, 3)
            p0 = rng.uniform(0.1, 9.4, size=3)
            p1 = p0.copy()
            p1[axis] += rng.uniform(2.0, 8.0)
            streams.append(np.stack([p0, p1]))
        kept = filter_by_mask(StreamlineSet(streamlines=streams), mask)
        expected = [
            s for s in streams
            if any(segment_crosses_voxel(s[0], s[1], v) for v in set(voxels))
        ]
        assert len(kept) == len(expected)


class TestResample:
    def test_straight_segment(self):
        out = resample_streamline(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]), 3)
        np.testing.assert_allclose(out[:, 0], [0.0, 0.5, 1.0])
        np.testing.assert_allclose(out[:, 1:], 0.0)

    def test_fixed_point(self):
        points = np.column_stack([np.linspace(0, 4, 5), np.zeros(5), np.zeros(5)])
        out = resample_streamline(points, 5)
        np.testing.assert_allclose(out, points, atol=1e-12)

    def test_against_numeric_integration_oracle(self):
        rng = np.random.default_rng(29)
        points = np.cumsum(rng.uniform(-2, 2, size=(9, 3)), axis=0)
        num_points = 11
        out = resample_streamline(points, num_points)

        # independent oracle: dense sampling through every vertex, chord-sum arc
        t_dense = np.concatenate(
            [np.linspace(s, s + 1, 50001)[:-1] for s in range(len(points) - 1)]
            + [[len(points) - 1.0]]
        )
        seg = np.clip(t_dense.astype(int), 0, len(points) - 2)
        frac = t_dense - seg
        curve = points[seg] + frac[:, None] * (points[seg + 1] - points[seg])
        chords = np.linalg.norm(np.diff(curve, axis=0), axis=1)
        arc = np.concatenate([[0.0], np.cumsum(chords)])
        targets = np.linspace(0, arc[-1], num_points)
        expected = np.column_stack(
            [np.interp(targets, arc, curve[:, c]) for c in range(3)]
        )
        np.testing.assert_allclose(out, expected, atol=1e-4)

        # endpoints exact; arc positions match the oracle targets to 1e-6
        np.testing.assert_array_equal(out[0], points[0])
        np.testing.assert_array_equal(out[-1], points[-1])
        seg_len = np.linalg.norm(np.diff(points, axis=0), axis=1)
        arc_before = np.concatenate([[0.0], np.cumsum(seg_len)])
        arc_positions = []
        for p in out:
            best = None
            for s in range(len(points) - 1):
                d = points[s + 1] - points[s]
                t = np.dot(p - points[s], d) / np.dot(d, d)
                if -1e-9 <= t <= 1 + 1e-9 and np.linalg.norm(points[s] + t * d - p) < 1e-8:
                    best = arc_before[s] + np.clip(t, 0, 1) * seg_len[s]
                    break
            assert best is not None, "resampled point not on the polyline"
            arc_positions.append(best)
        np.testing.assert_allclose(arc_positions, targets, atol=1e-6)

    def test_zero_length_error(self):
        with pytest.raises(ValueError, match="zero-length"):
            resample_streamline(np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]), 3)

    def test_bad_point_count(self):
        with pytest.raises(ValueError, match="num_points"):
            resample_streamline(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]), 1)


class TestStreamlineDistance:
    def test_identical_zero(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(8, 3))
        assert streamline_distance(a, a) == 0.0

    def test_parallel_offset(self):
        a = np.column_stack([np.linspace(0, 10, 6), np.zeros(6), np.zeros(6)])
        b = a + np.array([0.0, 2.5, 0.0])
        assert streamline_distance(a, b) == pytest.approx(2.5)

    def test_flip_invariance(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(9, 3))
        assert streamline_distance(a, a[::-1]) == pytest.approx(0.0, abs=1e-12)

    def test_symmetry_nonnegativity(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            a, b = rng.normal(size=(2, 7, 3))
            dab = streamline_distance(a, b)
            assert dab >= 0
            assert dab == pytest.approx(streamline_distance(b, a), rel=1e-12)

    def test_point_count_mismatch(self):
        with pytest.raises(ValueError, match="point counts"):
            streamline_distance(np.zeros((4, 3)), np.zeros((5, 3)))

    def test_matrix_matches_pairwise(self):
        rng = np.random.default_rng(12)
        pts = rng.normal(size=(15, 6, 3)) * 5
        matrix = pairwise_distance_matrix(pts)
        for i in range(15):
            for j in range(15):
                assert matrix[i, j] == pytest.approx(streamline_distance(pts[i], pts[j]), abs=1e-10)


def make_bundles(rng, k=4, per_bundle=20, spread=0.3, gap=50.0):
    """k tight bundles with inter-bundle gaps far exceeding the spread."""
    streams, truth = [], []
    for b in range(k):
        origin = np.array([gap * b, gap * (b % 2), 0.0])
        direction = np.array([0.0, 0.0, 1.0])
        for _ in range(per_bundle):
            offset = rng.normal(0, spread, size=3)
            base = np.linspace(0, 20, 10)[:, None] * direction + origin + offset
            streams.append(base)
            truth.append(b)
    return streams, np.array(truth)


class TestClustering:
    def test_bundle_recovery(self):
        rng = np.random.default_rng(31)
        streams, truth = make_bundles(rng)
        model = cluster_streamlines([StreamlineSet(streamlines=streams)], k=4, num_points=8, seed=0)
        assert model.k == 4
        ids = assign_clusters(StreamlineSet(streamlines=streams), model)
        # each medoid cluster is exactly one bundle
        for cid in range(1, 5):
            bundles = set(truth[ids == cid])
            assert len(bundles) == 1
        assert len({tuple(sorted(set(truth[ids == c]))) for c in range(1, 5)}) == 4

    def test_k1_matches_exhaustive_medoid(self):
        rng = np.random.default_rng(6)
        streams = [rng.normal(size=(5, 3)) * 10 for _ in range(60)]
        model = cluster_streamlines([StreamlineSet(streamlines=streams)], k=1, num_points=6, seed=0)
        resampled = np.stack([resample_streamline(s, 6) for s in streams])
        costs = [
            sum(streamline_distance(resampled[i], resampled[j]) for j in range(len(streams)))
            for i in range(len(streams))
        ]
        best = int(np.argmin(costs))
        np.testing.assert_allclose(model.medoids[0], resampled[best])

    def test_determinism(self):
        rng = np.random.default_rng(44)
        streams, _ = make_bundles(rng, k=3, per_bundle=10)
        sets = [StreamlineSet(streamlines=streams)]
        m1 = cluster_streamlines(sets, k=3, num_points=7, seed=5)
        m2 = cluster_streamlines(sets, k=3, num_points=7, seed=5)
        for a, b in zip(m1.medoids, m2.medoids):
            np.testing.assert_array_equal(a, b)

    def test_too_few_streamlines(self):
        ss = StreamlineSet(streamlines=[np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])])
        with pytest.raises(ValueError, match="at least k"):
            cluster_streamlines([ss], k=3)

    def test_max_pool_even_sampling(self):
        rng = np.random.default_rng(3)
        sets = [
            StreamlineSet(streamlines=[rng.normal(size=(4, 3)) for _ in range(n)], subject_id=f"s{i}")
            for i, n in enumerate([30, 30, 30])
        ]
        pooled = tract._pool_streamlines(sets, 15, np.random.default_rng(0))
        assert len(pooled) == 15

    def test_every_cluster_reachable(self):
        rng = np.random.default_rng(99)
        streams, _ = make_bundles(rng, k=3, per_bundle=12)
        ss = StreamlineSet(streamlines=streams)
        model = cluster_streamlines([ss], k=3, num_points=7, seed=1)
        ids = assign_clusters(ss, model)
        assert set(ids) == {1, 2, 3}


class TestAssign:
    def test_medoid_assigned_to_self(self):
        rng = np.random.default_rng(31)
        streams, _ = make_bundles(rng)
        model = cluster_streamlines([StreamlineSet(streamlines=streams)], k=4, num_points=8, seed=0)
        ids = assign_clusters(StreamlineSet(streamlines=list(model.medoids)), model)
        np.testing.assert_array_equal(ids, [1, 2, 3, 4])

    def test_tie_breaks_to_lowest(self):
        line = np.column_stack([np.linspace(0, 5, 4), np.zeros(4), np.zeros(4)])
        medoids = [line + np.array([0, off, 0]) for off in (3.0, -3.0, 7.0)]
        model = ClusterModel(medoids=medoids, point_count=4)
        ids = assign_clusters(StreamlineSet(streamlines=[line]), model)
        assert ids[0] == 1  # equidistant between medoids 1 and 2

    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(77)
        medoids = [rng.normal(size=(6, 3)) * 8 for _ in range(5)]
        model = ClusterModel(medoids=medoids, point_count=6)
        streams = [rng.normal(size=(rng.integers(3, 9), 3)) * 8 for _ in range(100)]
        ids = assign_clusters(StreamlineSet(streamlines=streams), model)
        for s, got in zip(streams, ids):
            r = resample_streamline(s, 6)
            dists = [streamline_distance(r, m) for m in model.medoids]
            assert got == int(np.argmin(dists)) + 1

    def test_order_invariance(self):
        rng = np.random.default_rng(15)
        medoids = [rng.normal(size=(5, 3)) * 6 for _ in range(3)]
        model = ClusterModel(medoids=medoids, point_count=5)
        streams = [rng.normal(size=(6, 3)) * 6 for _ in range(20)]
        fwd = assign_clusters(StreamlineSet(streamlines=streams), model)
        rev = assign_clusters(StreamlineSet(streamlines=streams[::-1]), model)
        np.testing.assert_array_equal(fwd, rev[::-1])

    def test_empty_set(self):
        model = ClusterModel(medoids=[np.arange(12, dtype=float).reshape(4, 3)], point_count=4)
        ids = assign_clusters(StreamlineSet(streamlines=[]), model)
        assert len(ids) == 0
