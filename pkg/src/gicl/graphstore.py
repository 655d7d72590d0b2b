"""Text-attributed graph data model: loading, validation, synthesis, splits.

A graph bundle on disk is a directory of five files:

    nodes.jsonl    one JSON object per line: {"id": int, "text": str, "label": str|null}
    edges.tsv      two tab-separated integer node ids per line
    features.bin   raw 32-bit little-endian floats, row-major
    features.json  {"rows": int, "cols": int, "dtype": "f32le", "layout": "row-major"}
    labels.json    ordered array of class label strings
    splits.json    optional: {"labeled": [int], "test": [int]}

Node ids are densely re-indexed to 0..n-1 in nodes.jsonl file order. Duplicate
edges are collapsed and self-loops dropped at load. Graphs are treated as
undirected by default (edge lists are symmetrized); pass symmetrize=False to
keep the stored direction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNLABELED = -1

BUNDLE_FILES = ("nodes.jsonl", "edges.tsv", "features.bin", "features.json", "labels.json")


class BundleError(Exception):
    """Raised when a graph bundle is missing, malformed, or inconsistent."""


@dataclass(frozen=True)
class TagGraph:
    """Immutable text-attributed graph in CSR form.

    ``labels[i]`` is a class index into ``label_vocab`` or ``UNLABELED``.
    Arrays are marked read-only after construction; many readers may share
    one instance.
    """

    n_nodes: int
    csr_offsets: np.ndarray
    csr_targets: np.ndarray
    features: np.ndarray
    texts: tuple[str, ...]
    labels: np.ndarray
    label_vocab: tuple[str, ...]
    directed: bool = False

    def __post_init__(self) -> None:
        offsets = np.ascontiguousarray(self.csr_offsets, dtype=np.int64)
        targets = np.ascontiguousarray(self.csr_targets, dtype=np.int64)
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "csr_offsets", offsets)
        object.__setattr__(self, "csr_targets", targets)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        self._validate()
        for arr in (offsets, targets, feats, labels):
            arr.setflags(write=False)

    def _validate(self) -> None:
        n = self.n_nodes
        if self.csr_offsets.shape != (n + 1,):
            raise ValueError(f"csr_offsets must have length n_nodes+1, got {self.csr_offsets.shape}")
        if self.csr_offsets[0] != 0 or np.any(np.diff(self.csr_offsets) < 0):
            raise ValueError("csr_offsets must be nondecreasing and start at 0")
        if self.csr_offsets[-1] != len(self.csr_targets):
            raise ValueError("last csr offset must equal number of stored edges")
        if len(self.csr_targets) and (self.csr_targets.min() < 0 or self.csr_targets.max() >= n):
            raise ValueError("edge target index out of range")
        if self.features.shape[0] != n:
            raise ValueError(f"features has {self.features.shape[0]} rows for {n} nodes")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if len(self.texts) != n:
            raise ValueError(f"expected {n} texts, got {len(self.texts)}")
        if self.labels.shape != (n,):
            raise ValueError("labels must have one entry per node")
        labeled = self.labels[self.labels != UNLABELED]
        if len(labeled) and labeled.max() >= len(self.label_vocab):
            raise ValueError("label index exceeds label vocabulary size")

    @property
    def n_edges(self) -> int:
        return int(len(self.csr_targets))

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_classes(self) -> int:
        return len(self.label_vocab)

    def labeled_node_ids(self) -> np.ndarray:
        return np.flatnonzero(self.labels != UNLABELED)


@dataclass(frozen=True)
class SplitSpec:
    """Which nodes supervise training, act as L2R queries, and are held out."""

    labeled_ids: np.ndarray
    query_train_ids: np.ndarray
    test_ids: np.ndarray
    fraction: float
    seed: int

    def __post_init__(self) -> None:
        labeled = np.ascontiguousarray(np.sort(self.labeled_ids), dtype=np.int64)
        queries = np.ascontiguousarray(np.sort(self.query_train_ids), dtype=np.int64)
        test = np.ascontiguousarray(np.sort(self.test_ids), dtype=np.int64)
        object.__setattr__(self, "labeled_ids", labeled)
        object.__setattr__(self, "query_train_ids", queries)
        object.__setattr__(self, "test_ids", test)
        if np.intersect1d(labeled, test).size:
            raise ValueError("labeled_ids and test_ids must be disjoint")
        if not np.all(np.isin(queries, labeled)):
            raise ValueError("query_train_ids must be a subset of labeled_ids")
        for arr in (labeled, queries, test):
            arr.setflags(write=False)


def _build_csr(n_nodes: int, edges: np.ndarray, symmetrize: bool) -> tuple[np.ndarray, np.ndarray]:
    """Dedup, drop self-loops, optionally symmetrize, and pack edges as CSR."""
    if edges.size == 0:
        return np.zeros(n_nodes + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    edges = edges[edges[:, 0] != edges[:, 1]]
    if symmetrize and edges.size:
        edges = np.concatenate([edges, edges[:, ::-1]], axis=0)
    if edges.size:
        edges = np.unique(edges, axis=0)
    offsets = np.zeros(n_nodes + 1, dtype=np.int64)
    if edges.size:
        counts = np.bincount(edges[:, 0], minlength=n_nodes)
        offsets[1:] = np.cumsum(counts)
        targets = edges[:, 1].astype(np.int64)
    else:
        targets = np.zeros(0, dtype=np.int64)
    return offsets, targets


def neighbors(graph: TagGraph, node: int) -> np.ndarray:
    """Neighbor ids of ``node`` in CSR (ascending id) order."""
    if not 0 <= node < graph.n_nodes:
        raise IndexError(f"node {node} out of range for graph with {graph.n_nodes} nodes")
    lo, hi = graph.csr_offsets[node], graph.csr_offsets[node + 1]
    return graph.csr_targets[lo:hi]


def load_bundle(path: str | Path, symmetrize: bool = True) -> TagGraph:
    """Load and validate a graph bundle directory."""
    root = Path(path)
    for name in BUNDLE_FILES:
        if not (root / name).is_file():
            raise BundleError(f"{root / name}: required bundle file is missing")

    with open(root / "labels.json", encoding="utf-8") as fh:
        vocab = json.load(fh)
    if not isinstance(vocab, list) or not all(isinstance(v, str) for v in vocab):
        raise BundleError(f"{root / 'labels.json'}: expected a JSON array of class strings")
    class_index = {name: i for i, name in enumerate(vocab)}

    texts: list[str] = []
    labels: list[int] = []
    id_map: dict[int, int] = {}
    with open(root / "nodes.jsonl", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise BundleError(f"nodes.jsonl line {lineno}: invalid JSON ({exc.msg})") from exc
            if "id" not in obj or "text" not in obj:
                raise BundleError(f"nodes.jsonl line {lineno}: object needs 'id' and 'text'")
            orig = int(obj["id"])
            if orig in id_map:
                raise BundleError(f"nodes.jsonl line {lineno}: duplicate node id {orig}")
            id_map[orig] = len(texts)
            texts.append(str(obj["text"]))
            raw_label = obj.get("label")
            if raw_label is None:
                labels.append(UNLABELED)
            elif raw_label in class_index:
                labels.append(class_index[raw_label])
            else:
                raise BundleError(f"nodes.jsonl line {lineno}: unknown label {raw_label!r}")
    n_nodes = len(texts)

    with open(root / "features.json", encoding="utf-8") as fh:
        header = json.load(fh)
    rows, cols = int(header["rows"]), int(header["cols"])
    if header.get("dtype") != "f32le" or header.get("layout") != "row-major":
        raise BundleError(f"{root / 'features.json'}: only f32le row-major features are supported")
    if rows != n_nodes:
        raise BundleError(
            f"features.json declares rows={rows} but nodes.jsonl has {n_nodes} lines"
        )
    raw = np.fromfile(root / "features.bin", dtype="<f4")
    if raw.size != rows * cols:
        raise BundleError(
            f"features.bin holds {raw.size} values, expected {rows}x{cols}={rows * cols}"
        )
    features = raw.reshape(rows, cols)
    bad = np.argwhere(~np.isfinite(features))
    if bad.size:
        r, c = bad[0]
        raise BundleError(f"features.bin row {r} col {c}: non-finite value")

    edge_list: list[tuple[int, int]] = []
    with open(root / "edges.tsv", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise BundleError(f"edges.tsv line {lineno}: expected two tab-separated ids")
            try:
                src, dst = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise BundleError(f"edges.tsv line {lineno}: non-integer node id") from exc
            if src not in id_map or dst not in id_map:
                raise BundleError(f"edges.tsv line {lineno}: unknown node id {src if src not in id_map else dst}")
            edge_list.append((id_map[src], id_map[dst]))
    edges = np.array(edge_list, dtype=np.int64).reshape(-1, 2)
    offsets, targets = _build_csr(n_nodes, edges, symmetrize=symmetrize)

    return TagGraph(
        n_nodes=n_nodes,
        csr_offsets=offsets,
        csr_targets=targets,
        features=features,
        texts=tuple(texts),
        labels=np.array(labels, dtype=np.int64),
        label_vocab=tuple(vocab),
        directed=not symmetrize,
    )


def write_bundle(graph: TagGraph, path: str | Path) -> None:
    """Write a graph back out as a bundle directory.

    For undirected graphs each edge is stored once (low id first), so
    load_bundle(write_bundle(g)) reproduces g exactly.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "nodes.jsonl", "w", encoding="utf-8") as fh:
        for i in range(graph.n_nodes):
            label = None if graph.labels[i] == UNLABELED else graph.label_vocab[graph.labels[i]]
            fh.write(json.dumps({"id": i, "text": graph.texts[i], "label": label}) + "\n")
    with open(root / "edges.tsv", "w", encoding="utf-8") as fh:
        for src in range(graph.n_nodes):
            for dst in neighbors(graph, src):
                if graph.directed or src < dst:
                    fh.write(f"{src}\t{int(dst)}\n")
    graph.features.astype("<f4").tofile(root / "features.bin")
    with open(root / "features.json", "w", encoding="utf-8") as fh:
        json.dump(
            {"rows": graph.n_nodes, "cols": graph.feature_dim, "dtype": "f32le", "layout": "row-major"},
            fh,
        )
    with open(root / "labels.json", "w", encoding="utf-8") as fh:
        json.dump(list(graph.label_vocab), fh)


def load_split_file(path: str | Path) -> dict[str, np.ndarray] | None:
    """Read a bundle's optional splits.json, if present."""
    split_path = Path(path) / "splits.json"
    if not split_path.is_file():
        return None
    with open(split_path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return {
        "labeled": np.array(obj.get("labeled", []), dtype=np.int64),
        "test": np.array(obj.get("test", []), dtype=np.int64),
    }


def bundle_hash(path: str | Path) -> str:
    """Stable digest of a bundle's file contents, for run manifests."""
    root = Path(path)
    digest = hashlib.sha256()
    for name in BUNDLE_FILES + ("splits.json",):
        fp = root / name
        if fp.is_file():
            digest.update(name.encode())
            digest.update(fp.read_bytes())
    return digest.hexdigest()[:16]


def _stratified_sample(rng: np.random.Generator, pool: np.ndarray, labels: np.ndarray,
                       fraction: float) -> np.ndarray:
    """Sample ~fraction of pool per class, at least one node from each."""
    chosen: list[np.ndarray] = []
    for cls in np.unique(labels[pool]):
        members = pool[labels[pool] == cls]
        take = max(1, int(round(fraction * len(members))))
        take = min(take, len(members))
        chosen.append(rng.choice(members, size=take, replace=False))
    return np.sort(np.concatenate(chosen))


def sample_label_fraction(
    graph: TagGraph,
    fraction: float,
    seed: int,
    test_ids: np.ndarray | None = None,
    test_fraction: float = 0.2,
) -> SplitSpec:
    """Stratified sample of the labeled nodes to use as supervision.

    When no test set is supplied, one is first carved out of the labeled
    nodes (``test_fraction`` per class); the supervision sample is then
    drawn from the remainder. Labeled nodes that land in neither set are
    discarded from supervision. Deterministic for a given seed.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    all_labeled = graph.labeled_node_ids()
    if all_labeled.size == 0:
        raise ValueError("graph has no labeled nodes")
    counts = np.bincount(graph.labels[all_labeled], minlength=graph.n_classes)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"class {graph.label_vocab[empty[0]]!r} has zero labeled nodes")

    rng = np.random.default_rng(seed)
    if test_ids is None:
        test_ids = _stratified_sample(rng, all_labeled, graph.labels, test_fraction)
    else:
        test_ids = np.asarray(test_ids, dtype=np.int64)
    pool = np.setdiff1d(all_labeled, test_ids)
    if pool.size == 0:
        raise ValueError("no labeled nodes remain outside the test set")
    pool_counts = np.bincount(graph.labels[pool], minlength=graph.n_classes)
    if np.any(pool_counts[counts > 0] == 0):
        raise ValueError("a class has no labeled nodes outside the test set")

    labeled_ids = pool if fraction == 1.0 else _stratified_sample(rng, pool, graph.labels, fraction)
    return SplitSpec(
        labeled_ids=labeled_ids,
        query_train_ids=labeled_ids,
        test_ids=test_ids,
        fraction=fraction,
        seed=seed,
    )


def synth_sbm(
    n_nodes: int,
    n_classes: int,
    p_in: float,
    p_out: float,
    d: int,
    noise: float,
    seed: int,
) -> TagGraph:
    """Stochastic block model with class-correlated features and templated texts.

    Nodes are assigned to classes in contiguous blocks. Each node's feature
    row is its class centroid (orthogonal unit vectors in d dims) plus
    Gaussian noise of the given scale; its text is a templated sentence
    embedding the class name. All nodes are labeled.
    """
    if n_classes > d:
        raise ValueError(f"n_classes={n_classes} must not exceed feature dim d={d}")
    if not (0 <= p_out <= p_in <= 1):
        raise ValueError(f"need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if n_nodes < n_classes:
        raise ValueError("need at least one node per class")

    rng = np.random.default_rng(seed)
    labels = (np.arange(n_nodes, dtype=np.int64) * n_classes) // n_nodes

    iu, ju = np.triu_indices(n_nodes, k=1)
    probs = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < probs
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    offsets, targets = _build_csr(n_nodes, edges, symmetrize=True)

    centroids = np.eye(n_classes, d, dtype=np.float64)
    features = centroids[labels] + noise * rng.standard_normal((n_nodes, d))

    vocab = tuple(f"topic-{c}" for c in range(n_classes))
    texts = tuple(
        f"Document {i}. A short note discussing {vocab[labels[i]]} and related ideas."
        for i in range(n_nodes)
    )
    return TagGraph(
        n_nodes=n_nodes,
        csr_offsets=offsets,
        csr_targets=targets,
        features=features.astype(np.float32),
        texts=texts,
        labels=labels,
        label_vocab=vocab,
        directed=False,
    )
