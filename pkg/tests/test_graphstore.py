import json

import numpy as np
import pytest

from gicl.graphstore import (
    UNLABELED,
    BundleError,
    TagGraph,
    bundle_hash,
    load_bundle,
    load_split_file,
    neighbors,
    sample_label_fraction,
    synth_sbm,
    write_bundle,
)


def write_raw_bundle(root, nodes, edges, features, vocab, splits=None):
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "nodes.jsonl", "w") as fh:
        for obj in nodes:
            fh.write(json.dumps(obj) + "\n")
    with open(root / "edges.tsv", "w") as fh:
        for s, t in edges:
            fh.write(f"{s}\t{t}\n")
    features = np.asarray(features, dtype="<f4")
    features.tofile(root / "features.bin")
    with open(root / "features.json", "w") as fh:
        json.dump({"rows": features.shape[0], "cols": features.shape[1],
                   "dtype": "f32le", "layout": "row-major"}, fh)
    with open(root / "labels.json", "w") as fh:
        json.dump(vocab, fh)
    if splits is not None:
        with open(root / "splits.json", "w") as fh:
            json.dump(splits, fh)


@pytest.fixture
def tiny_bundle(tmp_path):
    nodes = [
        {"id": 10, "text": "first", "label": "a"},
        {"id": 11, "text": "second", "label": "b"},
        {"id": 12, "text": "third", "label": None},
    ]
    write_raw_bundle(tmp_path / "b", nodes, [(10, 11), (11, 12)],
                     np.arange(6).reshape(3, 2), ["a", "b"])
    return tmp_path / "b"


class TestLoadBundle:
    def test_directed_csr_layout(self, tiny_bundle):
        g = load_bundle(tiny_bundle, symmetrize=False)
        assert g.n_nodes == 3
        assert g.csr_offsets.tolist() == [0, 1, 2, 2]
        assert g.csr_targets.tolist() == [1, 2]
        assert g.directed

    def test_symmetrized_by_default(self, tiny_bundle):
        g = load_bundle(tiny_bundle)
        assert neighbors(g, 1).tolist() == [0, 2]
        assert not g.directed

    def test_ids_reindexed_in_file_order(self, tiny_bundle):
        g = load_bundle(tiny_bundle)
        assert g.texts == ("first", "second", "third")
        assert g.labels.tolist() == [0, 1, UNLABELED]

    def test_duplicate_edges_collapse(self, tmp_path):
        nodes = [{"id": i, "text": "t", "label": "a"} for i in range(2)]
        write_raw_bundle(tmp_path / "b", nodes, [(0, 1), (0, 1)], np.zeros((2, 2)), ["a"])
        g = load_bundle(tmp_path / "b", symmetrize=False)
        assert g.n_edges == 1

    def test_self_loops_dropped(self, tmp_path):
        nodes = [{"id": i, "text": "t", "label": "a"} for i in range(2)]
        write_raw_bundle(tmp_path / "b", nodes, [(0, 0), (0, 1)], np.zeros((2, 2)), ["a"])
        g = load_bundle(tmp_path / "b", symmetrize=False)
        assert g.csr_targets.tolist() == [1]

    def test_row_count_mismatch_names_files(self, tmp_path):
        nodes = [{"id": i, "text": "t", "label": "a"} for i in range(4)]
        write_raw_bundle(tmp_path / "b", nodes, [], np.zeros((4, 2)), ["a"])
        with open(tmp_path / "b" / "features.json", "w") as fh:
            json.dump({"rows": 5, "cols": 2, "dtype": "f32le", "layout": "row-major"}, fh)
        with pytest.raises(BundleError, match="rows=5.*4 lines"):
            load_bundle(tmp_path / "b")

    def test_unknown_label_names_line(self, tmp_path):
        nodes = [{"id": 0, "text": "t", "label": "a"}, {"id": 1, "text": "t", "label": "zzz"}]
        write_raw_bundle(tmp_path / "b", nodes, [], np.zeros((2, 2)), ["a"])
        with pytest.raises(BundleError, match="line 2.*zzz"):
            load_bundle(tmp_path / "b")

    def test_missing_file(self, tmp_path):
        (tmp_path / "b").mkdir()
        with pytest.raises(BundleError, match="missing"):
            load_bundle(tmp_path / "b")

    def test_non_finite_feature_names_row(self, tmp_path):
        nodes = [{"id": 0, "text": "t", "label": "a"}, {"id": 1, "text": "t", "label": "a"}]
        feats = np.zeros((2, 2))
        feats[1, 0] = np.nan
        write_raw_bundle(tmp_path / "b", nodes, [], feats, ["a"])
        with pytest.raises(BundleError, match="row 1"):
            load_bundle(tmp_path / "b")

    def test_unknown_edge_endpoint_names_line(self, tmp_path):
        nodes = [{"id": 0, "text": "t", "label": "a"}]
        write_raw_bundle(tmp_path / "b", nodes, [(0, 7)], np.zeros((1, 2)), ["a"])
        with pytest.raises(BundleError, match="edges.tsv line 1"):
            load_bundle(tmp_path / "b")


class TestRoundTrip:
    def test_write_then_load_is_identity(self, tmp_path, noisy_sbm):
        write_bundle(noisy_sbm, tmp_path / "out")
        back = load_bundle(tmp_path / "out")
        assert back.n_nodes == noisy_sbm.n_nodes
        assert np.array_equal(back.csr_offsets, noisy_sbm.csr_offsets)
        assert np.array_equal(back.csr_targets, noisy_sbm.csr_targets)
        assert back.features.tobytes() == noisy_sbm.features.tobytes()
        assert back.texts == noisy_sbm.texts
        assert np.array_equal(back.labels, noisy_sbm.labels)
        assert back.label_vocab == noisy_sbm.label_vocab

    def test_directed_round_trip(self, tmp_path, tiny_bundle):
        g = load_bundle(tiny_bundle, symmetrize=False)
        write_bundle(g, tmp_path / "out")
        back = load_bundle(tmp_path / "out", symmetrize=False)
        assert np.array_equal(back.csr_offsets, g.csr_offsets)
        assert np.array_equal(back.csr_targets, g.csr_targets)
        assert back.directed

    def test_bundle_hash_tracks_content(self, tmp_path, clean_sbm, noisy_sbm):
        write_bundle(clean_sbm, tmp_path / "one")
        write_bundle(clean_sbm, tmp_path / "two")
        write_bundle(noisy_sbm, tmp_path / "three")
        assert bundle_hash(tmp_path / "one") == bundle_hash(tmp_path / "two")
        assert bundle_hash(tmp_path / "one") != bundle_hash(tmp_path / "three")

    def test_split_file_roundtrip(self, tmp_path):
        nodes = [{"id": i, "text": "t", "label": "a"} for i in range(4)]
        write_raw_bundle(tmp_path / "b", nodes, [], np.zeros((4, 2)), ["a"],
                         splits={"labeled": [0, 1], "test": [2, 3]})
        got = load_split_file(tmp_path / "b")
        assert got["labeled"].tolist() == [0, 1]
        assert got["test"].tolist() == [2, 3]
        assert load_split_file(tmp_path) is None


class TestNeighbors:
    def test_path_interior(self, path_graph):
        assert neighbors(path_graph, 1).tolist() == [0, 2]

    def test_isolated_node_empty(self, path_graph):
        assert neighbors(path_graph, 6).tolist() == []

    def test_star_center_lists_leaves_in_id_order(self):
        # center 2, leaves 0,1,3,4
        edges = np.array([[2, 0], [2, 1], [2, 3], [2, 4]])
        from gicl.graphstore import _build_csr

        offsets, targets = _build_csr(5, edges, symmetrize=True)
        g = TagGraph(
            n_nodes=5, csr_offsets=offsets, csr_targets=targets,
            features=np.zeros((5, 2), np.float32), texts=("t",) * 5,
            labels=np.zeros(5, np.int64), label_vocab=("a",),
        )
        assert neighbors(g, 2).tolist() == [0, 1, 3, 4]

    def test_out_of_range(self, path_graph):
        with pytest.raises(IndexError):
            neighbors(path_graph, 99)

    def test_no_duplicates_and_in_range(self, noisy_sbm):
        for v in range(noisy_sbm.n_nodes):
            ns = neighbors(noisy_sbm, v).tolist()
            assert len(ns) == len(set(ns))
            assert all(0 <= u < noisy_sbm.n_nodes for u in ns)
            assert v not in ns


class TestSampleLabelFraction:
    def test_full_fraction_keeps_every_pool_node(self, noisy_sbm):
        split = sample_label_fraction(noisy_sbm, 1.0, seed=0)
        pool = np.setdiff1d(noisy_sbm.labeled_node_ids(), split.test_ids)
        assert np.array_equal(split.labeled_ids, pool)

    def test_balanced_hundred_nodes_two_per_class(self):
        g = synth_sbm(n_nodes=100, n_classes=5, p_in=0.2, p_out=0.02, d=8, noise=0.1, seed=9)
        split = sample_label_fraction(g, 0.1, seed=3, test_ids=np.array([], dtype=np.int64))
        assert len(split.labeled_ids) == 10
        counts = np.bincount(g.labels[split.labeled_ids], minlength=5)
        assert counts.tolist() == [2, 2, 2, 2, 2]

    def test_deterministic(self, noisy_sbm):
        a = sample_label_fraction(noisy_sbm, 0.3, seed=5)
        b = sample_label_fraction(noisy_sbm, 0.3, seed=5)
        assert np.array_equal(a.labeled_ids, b.labeled_ids)
        assert np.array_equal(a.test_ids, b.test_ids)

    def test_size_within_class_count_of_target(self, noisy_sbm):
        for fraction in (0.1, 0.25, 0.6):
            split = sample_label_fraction(noisy_sbm, fraction, seed=1)
            pool = np.setdiff1d(noisy_sbm.labeled_node_ids(), split.test_ids)
            target = fraction * pool.size
            assert abs(len(split.labeled_ids) - target) <= noisy_sbm.n_classes
            counts = np.bincount(noisy_sbm.labels[split.labeled_ids],
                                 minlength=noisy_sbm.n_classes)
            assert counts.min() >= 1

    def test_disjoint_from_test(self, noisy_sbm):
        split = sample_label_fraction(noisy_sbm, 0.2, seed=7)
        assert np.intersect1d(split.labeled_ids, split.test_ids).size == 0
        assert np.all(np.isin(split.query_train_ids, split.labeled_ids))

    def test_fraction_out_of_range(self, noisy_sbm):
        with pytest.raises(ValueError):
            sample_label_fraction(noisy_sbm, 0.0, seed=0)
        with pytest.raises(ValueError):
            sample_label_fraction(noisy_sbm, 1.5, seed=0)

    def test_class_with_no_labels_rejected(self):
        g = synth_sbm(n_nodes=12, n_classes=3, p_in=0.5, p_out=0.1, d=4, noise=0.0, seed=0)
        labels = g.labels.copy()
        labels[labels == 2] = UNLABELED
        bare = TagGraph(
            n_nodes=g.n_nodes, csr_offsets=g.csr_offsets, csr_targets=g.csr_targets,
            features=g.features, texts=g.texts, labels=labels, label_vocab=g.label_vocab,
        )
        with pytest.raises(ValueError, match="zero labeled"):
            sample_label_fraction(bare, 0.5, seed=0)


class TestSynthSbm:
    def test_zero_noise_features_are_centroids(self, clean_sbm):
        centroids = np.eye(clean_sbm.n_classes, clean_sbm.feature_dim, dtype=np.float32)
        assert np.array_equal(clean_sbm.features, centroids[clean_sbm.labels])

    def test_degenerate_densities_make_cliques(self):
        g = synth_sbm(n_nodes=6, n_classes=2, p_in=1.0, p_out=0.0, d=4, noise=0.0, seed=1)
        for v in range(6):
            expected = sorted(u for u in range(6) if u != v and g.labels[u] == g.labels[v])
            assert neighbors(g, v).tolist() == expected

    def test_empirical_densities(self):
        g = synth_sbm(n_nodes=1000, n_classes=5, p_in=0.05, p_out=0.005, d=16, noise=0.6, seed=0)
        same = cross = same_pairs = cross_pairs = 0
        offsets, targets, labels = g.csr_offsets, g.csr_targets, g.labels
        for v in range(g.n_nodes):
            for u in targets[offsets[v]:offsets[v + 1]]:
                if u > v:
                    if labels[u] == labels[v]:
                        same += 1
                    else:
                        cross += 1
        counts = np.bincount(labels)
        same_pairs = int(sum(c * (c - 1) // 2 for c in counts))
        total_pairs = g.n_nodes * (g.n_nodes - 1) // 2
        cross_pairs = total_pairs - same_pairs
        assert abs(same / same_pairs - 0.05) < 0.02
        assert abs(cross / cross_pairs - 0.005) < 0.02

    def test_deterministic(self):
        a = synth_sbm(50, 2, 0.3, 0.05, 4, 0.2, seed=12)
        b = synth_sbm(50, 2, 0.3, 0.05, 4, 0.2, seed=12)
        assert a.features.tobytes() == b.features.tobytes()
        assert np.array_equal(a.csr_targets, b.csr_targets)

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            synth_sbm(10, 5, 0.5, 0.1, d=3, noise=0.0, seed=0)  # C > d
        with pytest.raises(ValueError):
            synth_sbm(10, 2, 0.1, 0.5, d=4, noise=0.0, seed=0)  # p_out > p_in

    def test_all_nodes_labeled_with_class_texts(self, clean_sbm):
        assert np.all(clean_sbm.labels != UNLABELED)
        for i in range(clean_sbm.n_nodes):
            assert clean_sbm.label_vocab[clean_sbm.labels[i]] in clean_sbm.texts[i]


def test_graph_arrays_are_read_only(clean_sbm):
    with pytest.raises(ValueError):
        clean_sbm.features[0, 0] = 5.0
    with pytest.raises(ValueError):
        clean_sbm.csr_targets[0] = 0
