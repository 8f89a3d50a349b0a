"""Feature files, synthetic domains, manifest validation, stream gating."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msdem import stream as S
from msdem.errors import FeatureFileError, ManifestError, ValidationError


def write_tmp(tmp_path, name, labels, vectors, cardinality):
    p = tmp_path / name
    S.write_feature_file(p, np.asarray(labels), np.asarray(vectors, dtype=np.float32), cardinality)
    return p


class TestFeatureFiles:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        vectors = rng.normal(size=(10, 7)).astype(np.float32)
        labels = rng.integers(0, 5, size=10)
        p = write_tmp(tmp_path, "a.msfv", labels, vectors, 5)
        header, got_labels, got_vectors = S.load_feature_file(p)
        assert header.version == 1
        assert header.dim == 7
        assert header.n_records == 10
        assert header.label_cardinality == 5
        np.testing.assert_array_equal(got_labels, labels)
        np.testing.assert_array_equal(got_vectors, vectors)

    def test_header_is_21_bytes_little_endian(self, tmp_path):
        p = write_tmp(tmp_path, "h.msfv", [0], np.zeros((1, 3)), 1)
        raw = p.read_bytes()
        assert raw[:4] == b"MSFV"
        assert raw[4] == 1
        assert int.from_bytes(raw[5:9], "little") == 3
        assert int.from_bytes(raw[9:17], "little") == 1
        assert int.from_bytes(raw[17:21], "little") == 1
        assert len(raw) == 21 + (4 + 12)

    def test_bad_magic_offset_zero(self, tmp_path):
        p = write_tmp(tmp_path, "m.msfv", [0], np.zeros((1, 2)), 1)
        raw = bytearray(p.read_bytes())
        raw[0] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(FeatureFileError) as exc:
            S.load_feature_file(p)
        assert exc.value.offset == 0

    def test_unsupported_version(self, tmp_path):
        p = write_tmp(tmp_path, "v.msfv", [0], np.zeros((1, 2)), 1)
        raw = bytearray(p.read_bytes())
        raw[4] = 9
        p.write_bytes(bytes(raw))
        with pytest.raises(FeatureFileError) as exc:
            S.load_feature_file(p)
        assert exc.value.offset == 4

    def test_truncated_payload_reports_offset(self, tmp_path):
        p = write_tmp(tmp_path, "t.msfv", [0, 1], np.zeros((2, 4)), 2)
        raw = p.read_bytes()
        p.write_bytes(raw[:-5])
        with pytest.raises(FeatureFileError) as exc:
            S.load_feature_file(p)
        assert exc.value.offset == len(raw) - 5

    def test_trailing_bytes_rejected(self, tmp_path):
        p = write_tmp(tmp_path, "x.msfv", [0], np.zeros((1, 2)), 1)
        p.write_bytes(p.read_bytes() + b"junk")
        with pytest.raises(FeatureFileError):
            S.load_feature_file(p)

    def test_label_out_of_range_offset_points_at_record(self, tmp_path):
        p = write_tmp(tmp_path, "l.msfv", [0, 1, 0], np.zeros((3, 2)), 2)
        raw = bytearray(p.read_bytes())
        rec_size = 4 + 8
        # patch the second record's label to 99
        raw[21 + rec_size : 21 + rec_size + 4] = (99).to_bytes(4, "little")
        p.write_bytes(bytes(raw))
        with pytest.raises(FeatureFileError) as exc:
            S.load_feature_file(p)
        assert exc.value.offset == 21 + rec_size

    def test_non_finite_value_rejected_on_read(self, tmp_path):
        p = write_tmp(tmp_path, "n.msfv", [0], np.zeros((1, 2)), 1)
        raw = bytearray(p.read_bytes())
        raw[21 + 4 : 21 + 8] = np.float32(np.nan).tobytes()
        p.write_bytes(bytes(raw))
        with pytest.raises(FeatureFileError):
            S.load_feature_file(p)

    def test_writer_rejects_bad_labels_and_nan(self, tmp_path):
        with pytest.raises(ValidationError):
            S.write_feature_file(tmp_path / "w.msfv", np.array([3]), np.zeros((1, 2)), 2)
        with pytest.raises(ValidationError):
            S.write_feature_file(tmp_path / "w.msfv", np.array([0]), np.full((1, 2), np.nan), 2)

    def test_chunked_read_equals_bulk(self, tmp_path):
        rng = np.random.default_rng(1)
        vectors = rng.normal(size=(100, 3)).astype(np.float32)
        labels = rng.integers(0, 4, size=100)
        p = write_tmp(tmp_path, "big.msfv", labels, vectors, 4)
        h1, l1, v1 = S.load_feature_file(p)
        h2, l2, v2 = S.load_feature_file(p, memory_budget_bytes=64)
        assert h1 == h2
        np.testing.assert_array_equal(l1, l2)
        np.testing.assert_array_equal(v1, v2)

    def test_iterator_matches_bulk(self, tmp_path):
        rng = np.random.default_rng(2)
        vectors = rng.normal(size=(9, 5)).astype(np.float32)
        labels = rng.integers(0, 3, size=9)
        p = write_tmp(tmp_path, "it.msfv", labels, vectors, 3)
        out = list(S.iter_feature_records(p, chunk_records=4))
        assert [lab for lab, _ in out] == list(labels)
        np.testing.assert_array_equal(np.stack([v for _, v in out]), vectors)


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 40),
    dim=st.integers(1, 16),
    cardinality=st.integers(1, 50),
    seed=st.integers(0, 2**31 - 1),
)
def test_feature_file_roundtrip_property(tmp_path_factory, n, dim, cardinality, seed):
    rng = np.random.default_rng(seed)
    vectors = (rng.normal(size=(n, dim)) * 100).astype(np.float32)
    labels = rng.integers(0, cardinality, size=n)
    p = tmp_path_factory.mktemp("ff") / "r.msfv"
    S.write_feature_file(p, labels, vectors, cardinality)
    _, got_labels, got_vectors = S.load_feature_file(p)
    np.testing.assert_array_equal(got_labels, labels)
    np.testing.assert_array_equal(got_vectors, vectors)


class TestFuse:
    def test_concatenation_order(self):
        bbs = [S.BackboneSpec("a", 2), S.BackboneSpec("b", 3)]
        rec = S.FeatureRecord(
            per_backbone=(np.array([1.0, 2.0]), np.array([3.0, 4.0, 5.0])),
            label=0,
            domain_id=0,
        )
        np.testing.assert_array_equal(S.fuse_features(rec, bbs), [1, 2, 3, 4, 5])

    def test_dim_mismatch_rejected(self):
        bbs = [S.BackboneSpec("a", 2)]
        rec = S.FeatureRecord(per_backbone=(np.zeros(3),), label=0, domain_id=0)
        with pytest.raises(ValidationError):
            S.fuse_features(rec, bbs)

    def test_record_from_row_inverts_fuse(self):
        bbs = [S.BackboneSpec("a", 2), S.BackboneSpec("b", 3)]
        row = np.arange(5.0)
        rec = S.record_from_row(row, bbs, label=7, domain_id=1)
        np.testing.assert_array_equal(S.fuse_features(rec, bbs), row)


class TestSynthDomain:
    def test_shapes_and_split(self):
        dom = S.synth_domain(seed=0, n_classes=4, samples_per_class=125,
                             backbone_dims=[8, 6], separation=5.0, noise=0.5)
        assert dom.train_vectors[0].shape == (400, 8)
        assert dom.train_vectors[1].shape == (400, 6)
        assert dom.test_vectors[0].shape == (100, 8)
        assert dom.train_labels.shape == (400,)
        assert set(dom.train_labels) == {0, 1, 2, 3}
        # 100/25 per class
        assert np.sum(dom.train_labels == 0) == 100
        assert np.sum(dom.test_labels == 0) == 25

    def test_deterministic_given_seed(self):
        a = S.synth_domain(seed=42, n_classes=3, samples_per_class=10, backbone_dims=[5], separation=2.0, noise=0.3)
        b = S.synth_domain(seed=42, n_classes=3, samples_per_class=10, backbone_dims=[5], separation=2.0, noise=0.3)
        np.testing.assert_array_equal(a.train_vectors[0], b.train_vectors[0])
        np.testing.assert_array_equal(a.test_vectors[0], b.test_vectors[0])
        c = S.synth_domain(seed=43, n_classes=3, samples_per_class=10, backbone_dims=[5], separation=2.0, noise=0.3)
        assert not np.array_equal(a.train_vectors[0], c.train_vectors[0])

    def test_samples_cluster_around_their_class_mean(self):
        dom = S.synth_domain(seed=1, n_classes=3, samples_per_class=50, backbone_dims=[16], separation=10.0, noise=0.1)
        for c in range(3):
            pts = dom.train_vectors[0][dom.train_labels == c]
            np.testing.assert_allclose(pts.mean(axis=0), dom.class_means[0][c], atol=0.15)

    def test_clone_with_zero_perturbation_shares_means(self):
        base = S.synth_domain(seed=5, n_classes=3, samples_per_class=10, backbone_dims=[4], separation=3.0, noise=0.2)
        clone = S.synth_domain(seed=6, n_classes=3, samples_per_class=10, backbone_dims=[4],
                               separation=3.0, noise=0.2, base_means=base.class_means, perturb_scale=0.0)
        np.testing.assert_array_equal(clone.class_means[0], base.class_means[0])

    def test_clone_perturbation_scales(self):
        base = S.synth_domain(seed=5, n_classes=6, samples_per_class=10, backbone_dims=[32], separation=3.0, noise=0.2)
        near = S.synth_domain(seed=7, n_classes=6, samples_per_class=10, backbone_dims=[32],
                              separation=3.0, noise=0.2, base_means=base.class_means, perturb_scale=0.1)
        far = S.synth_domain(seed=7, n_classes=6, samples_per_class=10, backbone_dims=[32],
                             separation=3.0, noise=0.2, base_means=base.class_means, perturb_scale=5.0)
        d_near = np.linalg.norm(near.class_means[0] - base.class_means[0])
        d_far = np.linalg.norm(far.class_means[0] - base.class_means[0])
        assert d_near < d_far

    def test_rejects_degenerate_configs(self):
        with pytest.raises(ValidationError):
            S.synth_domain(seed=0, n_classes=1, samples_per_class=10, backbone_dims=[4], separation=1.0, noise=0.1)
        with pytest.raises(ValidationError):
            S.synth_domain(seed=0, n_classes=2, samples_per_class=1, backbone_dims=[4], separation=1.0, noise=0.1)


def small_cfg(**overrides):
    defaults = dict(
        seed=11,
        backbones=[S.BackboneSpec("bb0", 6), S.BackboneSpec("bb1", 4)],
        n_domains=2,
        tasks_per_domain=2,
        classes_per_task=3,
        samples_per_class=10,
        separation=4.0,
        noise=0.4,
    )
    defaults.update(overrides)
    return S.SynthStreamConfig(**defaults)


class TestGenerateAndBuild:
    def test_generated_manifest_builds_a_stream(self, tmp_path):
        manifest_path = S.generate_synthetic_dataset(small_cfg(), tmp_path)
        stream = S.build_stream(manifest_path)
        assert stream.n_tasks == 4
        assert stream.backbone_dims == [6, 4]
        assert stream.label_cardinality == 12
        x, y = stream.train_data(1)
        assert x.shape == (3 * 8, 10)
        assert x.dtype == np.float32
        assert set(y) == set(stream.spec(1).class_ids)

    def test_task_order_modes(self, tmp_path):
        m1 = S.generate_synthetic_dataset(small_cfg(task_order="by_domain"), tmp_path / "a")
        m2 = S.generate_synthetic_dataset(small_cfg(task_order="round_robin"), tmp_path / "b")
        s1, s2 = S.build_stream(m1), S.build_stream(m2)
        assert [t.domain_id for t in s1.task_specs()] == [0, 0, 1, 1]
        assert [t.domain_id for t in s2.task_specs()] == [0, 1, 0, 1]

    def test_generation_is_deterministic(self, tmp_path):
        m1 = S.generate_synthetic_dataset(small_cfg(), tmp_path / "a")
        m2 = S.generate_synthetic_dataset(small_cfg(), tmp_path / "b")
        f1 = (m1.parent / "d0_bb0_train.msfv").read_bytes()
        f2 = (m2.parent / "d0_bb0_train.msfv").read_bytes()
        assert f1 == f2

    def test_global_labels_disjoint_across_domains(self, tmp_path):
        manifest_path = S.generate_synthetic_dataset(small_cfg(), tmp_path)
        stream = S.build_stream(manifest_path)
        seen = set()
        for spec in stream.task_specs():
            assert not (seen & set(spec.class_ids))
            seen.update(spec.class_ids)

    def test_misaligned_backbone_files_rejected(self, tmp_path):
        manifest_path = S.generate_synthetic_dataset(small_cfg(), tmp_path)
        # reverse the records of one backbone's train file for domain 0
        victim = tmp_path / "d0_bb1_train.msfv"
        header, labels, vectors = S.load_feature_file(victim)
        S.write_feature_file(victim, labels[::-1], vectors[::-1], header.label_cardinality)
        with pytest.raises(ManifestError) as exc:
            S.build_stream(manifest_path)
        assert "label order" in str(exc.value)

    def test_missing_file_rejected(self, tmp_path):
        manifest_path = S.generate_synthetic_dataset(small_cfg(), tmp_path)
        (tmp_path / "d1_bb0_test.msfv").unlink()
        with pytest.raises(ManifestError):
            S.build_stream(manifest_path)


class TestManifestValidation:
    def test_problems_are_listed_exhaustively(self, tmp_path):
        doc = {
            "backbones": [{"name": "a", "dim": 0}],
            "label_cardinality": 1,
            "domains": [],
            "tasks": [{"task_id": 2, "domain_id": 0, "class_ids": []}],
        }
        p = tmp_path / "m.yaml"
        S.write_manifest(p, doc)
        with pytest.raises(ManifestError) as exc:
            S.load_manifest(p)
        msg = str(exc.value)
        assert "dim must be a positive" in msg
        assert "label_cardinality" in msg
        assert "task_id must be 1" in msg

    def test_overlapping_class_ids_rejected(self, tmp_path):
        cfg = small_cfg()
        manifest_path = S.generate_synthetic_dataset(cfg, tmp_path)
        import yaml

        doc = yaml.safe_load(manifest_path.read_text())
        doc["tasks"][1]["class_ids"] = doc["tasks"][0]["class_ids"]
        S.write_manifest(manifest_path, doc)
        with pytest.raises(ManifestError) as exc:
            S.load_manifest(manifest_path)
        assert "already used" in str(exc.value)


class TestStreamGating:
    def make_stream(self, tmp_path):
        return S.build_stream(S.generate_synthetic_dataset(small_cfg(), tmp_path))

    def test_future_and_past_train_data_blocked(self, tmp_path):
        stream = self.make_stream(tmp_path)
        stream.train_data(1)
        with pytest.raises(ValidationError):
            stream.train_data(2)
        stream.advance()
        stream.train_data(2)
        with pytest.raises(ValidationError):
            stream.train_data(1)

    def test_future_test_data_blocked_until_reached(self, tmp_path):
        stream = self.make_stream(tmp_path)
        stream.test_data(1)
        with pytest.raises(ValidationError):
            stream.test_data(3)
        stream.advance()
        stream.advance()
        stream.test_data(3)
        # past test data stays open for forgetting evaluation
        stream.test_data(1)
