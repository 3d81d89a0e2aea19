#!/usr/bin/env python3
"""
Approximate nearest-token search over the embedding corpus.

The index is a hierarchical navigable small-world graph (HNSW): layer 0
holds every corpus row, each higher layer a geometrically thinning subset.
Queries descend greedily through the upper layers and finish with a beam
search on layer 0. Edges are undirected: every layer's adjacency is
symmetric and degrees are capped at M (2M on layer 0).

Distances are squared Euclidean throughout. `brute_force_knn` is the exact
scan that every recall measurement is checked against.
"""

import heapq
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptFileError, EmptyCorpus, EmptyIndex, VersionMismatchError, VocabularyMismatch
from .text import EmbeddingCorpus
from .utils import ensure_parent_dir, make_rng

logger = logging.getLogger(__name__)

INDEX_MAGIC = b'DISPHNSW'
INDEX_VERSION = 1
METRIC = 'sqeuclidean'


@dataclass
class KnnResult:
    """Neighbors ascending by distance, plus the number of distances computed."""

    neighbors: list[tuple[int, float]] = field(default_factory=list)
    distance_evaluations: int = 0

    @property
    def ids(self) -> list[int]:
        return [i for i, _ in self.neighbors]

    @property
    def distances(self) -> list[float]:
        return [d for _, d in self.neighbors]

    def __len__(self) -> int:
        return len(self.neighbors)


def _as_matrix(corpus) -> np.ndarray:
    vectors = corpus.vectors if isinstance(corpus, EmbeddingCorpus) else np.asarray(corpus)
    return np.asarray(vectors, dtype=np.float64)


def _sq_distances(vectors: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = vectors - q
    return (diff * diff).sum(axis=1)


def brute_force_knn(corpus, vector, num_neighbors: int) -> KnnResult:
    """
    Exact k nearest neighbors by a full scan.

    Args:
        corpus: EmbeddingCorpus or an (n, k) array
        vector: Query vector of length k
        num_neighbors: Number of results; clipped to n

    Returns:
        KnnResult ordered by distance, ties broken by the lower node id

    Raises:
        EmptyCorpus: If the corpus has no rows
    """
    vectors = _as_matrix(corpus)
    n = vectors.shape[0]
    if n == 0:
        raise EmptyCorpus("Cannot search an empty corpus")
    q = np.asarray(vector, dtype=np.float64)
    dists = _sq_distances(vectors, q)
    order = np.lexsort((np.arange(n), dists))[:max(0, min(num_neighbors, n))]
    return KnnResult([(int(i), float(dists[i])) for i in order], distance_evaluations=n)


class HnswIndex:
    """
    Layered small-world graph over the rows of an embedding corpus.

    Build one with `build_index`; it is immutable afterwards and queries are
    safe to run from several threads.

    Args:
        M: Maximum degree on upper layers; layer 0 allows 2M
        ef_construction: Beam width used while inserting
        seed: Seed for the per-node level draws
    """

    def __init__(self, M: int = 16, ef_construction: int = 200, seed: int = 0):
        if M < 2:
            raise ValueError(f"M must be at least 2, got {M}")
        if ef_construction < 1:
            raise ValueError(f"ef_construction must be positive, got {ef_construction}")
        self.M = M
        self.M0 = 2 * M
        self.ef_construction = ef_construction
        self.seed = seed
        self.level_mult = 1.0 / math.log(M)
        self.levels: list[int] = []
        self.layers: list[dict[int, list[int]]] = []
        self.entry_point: int | None = None
        self.k: int | None = None
        self.corpus_hash: str | None = None
        self._vectors: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.levels)

    @property
    def max_level(self) -> int:
        return len(self.layers) - 1

    def degree_cap(self, level: int) -> int:
        return self.M0 if level == 0 else self.M

    def draw_level(self, node: int) -> int:
        """floor(-ln(u) * 1/ln(M)) with u drawn from a stream seeded by (seed, node)."""
        u = 1.0 - make_rng(self.seed, 'level', node).random()
        return int(-math.log(u) * self.level_mult)

    def attach(self, corpus: EmbeddingCorpus):
        """Pair a structure-only index (e.g. freshly loaded) with its corpus vectors."""
        if self.corpus_hash is not None and corpus.content_hash() != self.corpus_hash:
            raise VocabularyMismatch("Index was built over a different embedding corpus")
        if corpus.n != self.n or (self.k is not None and corpus.k != self.k):
            raise VocabularyMismatch(
                f"Index has n={self.n}, k={self.k} but corpus has n={corpus.n}, k={corpus.k}"
            )
        self._vectors = _as_matrix(corpus)
        self.k = corpus.k
        self.corpus_hash = corpus.content_hash()

    def _distances(self, q: np.ndarray, nodes: list[int]) -> np.ndarray:
        return _sq_distances(self._vectors[nodes], q)

    def _search_layer(self, q, entry_points, ef, level, counter):
        """Beam search on one layer.

        entry_points is a list of (distance, node); returns up to ef
        (distance, node) pairs sorted ascending.
        """
        adjacency = self.layers[level]
        visited = set(node for _, node in entry_points)
        candidates = list(entry_points)
        heapq.heapify(candidates)
        results = [(-d, -node) for d, node in entry_points]
        heapq.heapify(results)
        while len(results) > ef:
            heapq.heappop(results)

        while candidates:
            dist, node = heapq.heappop(candidates)
            worst = -results[0][0]
            if dist > worst and len(results) >= ef:
                break
            fresh = [nb for nb in adjacency[node] if nb not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            dists = self._distances(q, fresh)
            counter[0] += len(fresh)
            for nb, d in zip(fresh, dists.tolist()):
                if len(results) < ef or d < -results[0][0]:
                    heapq.heappush(candidates, (d, nb))
                    heapq.heappush(results, (-d, -nb))
                    if len(results) > ef:
                        heapq.heappop(results)

        return sorted((-md, -mnode) for md, mnode in results)

    def _select_neighbors(self, candidates, limit, fill=False):
        """
        Neighbor-selection heuristic: walk candidates from nearest outward and
        keep one only if it is closer to the base node than to every neighbor
        already kept. With fill=True, pruned candidates top the list up to
        `limit` in distance order.
        """
        selected, pruned = [], []
        for d, node in candidates:
            if len(selected) >= limit:
                pruned.append((d, node))
                continue
            if selected:
                to_selected = self._distances(self._vectors[node], [s for _, s in selected])
                if np.any(to_selected < d):
                    pruned.append((d, node))
                    continue
            selected.append((d, node))
        if fill:
            for d, node in pruned:
                if len(selected) >= limit:
                    break
                selected.append((d, node))
        return selected

    def _connect(self, a: int, b: int, level: int):
        adjacency = self.layers[level]
        if b not in adjacency[a]:
            adjacency[a].append(b)
        if a not in adjacency[b]:
            adjacency[b].append(a)

    def _disconnect(self, a: int, b: int, level: int):
        adjacency = self.layers[level]
        adjacency[a].remove(b)
        adjacency[b].remove(a)

    def _shrink(self, node: int, level: int):
        """Bring `node` back under the degree cap, dropping edges in both directions."""
        adjacency = self.layers[level]
        cap = self.degree_cap(level)
        if len(adjacency[node]) <= cap:
            return
        nbrs = list(adjacency[node])
        dists = self._distances(self._vectors[node], nbrs)
        candidates = sorted(zip(dists.tolist(), nbrs))
        keep = {nb for _, nb in self._select_neighbors(candidates, cap, fill=True)}
        for nb in nbrs:
            if nb not in keep:
                self._disconnect(node, nb, level)

    def _insert(self, node: int, level: int):
        q = self._vectors[node]
        self.levels.append(level)
        for lc in range(min(level, self.max_level) + 1):
            self.layers[lc][node] = []

        if self.entry_point is None:
            for _ in range(len(self.layers), level + 1):
                self.layers.append({node: []})
            self.entry_point = node
            return

        counter = [0]
        ep = self.entry_point
        entry = [(float(self._distances(q, [ep])[0]), ep)]
        for lc in range(self.max_level, level, -1):
            entry = self._search_layer(q, entry, 1, lc, counter)[:1]

        for lc in range(min(level, self.max_level), -1, -1):
            found = self._search_layer(q, entry, self.ef_construction, lc, counter)
            for _, nb in self._select_neighbors(found, self.M):
                self._connect(node, nb, lc)
                self._shrink(nb, lc)
            entry = found

        if level > self.max_level:
            for _ in range(len(self.layers), level + 1):
                self.layers.append({node: []})
            self.entry_point = node

    def search(self, vector, num_neighbors: int = 1, ef_search: int = 64) -> KnnResult:
        """
        Approximate k nearest neighbors of `vector`.

        Raises:
            EmptyIndex: If the index holds no nodes
            ValueError: If ef_search < num_neighbors
        """
        if ef_search < num_neighbors:
            raise ValueError(f"ef_search ({ef_search}) must be at least num_neighbors ({num_neighbors})")
        if self.entry_point is None:
            raise EmptyIndex("Cannot query an empty index")
        if self._vectors is None:
            raise EmptyIndex("Index has no vectors attached; call attach(corpus) first")
        q = np.asarray(vector, dtype=np.float64)
        if q.shape != (self.k,):
            raise ValueError(f"Query must have length {self.k}, got shape {q.shape}")

        counter = [1]
        ep = self.entry_point
        entry = [(float(self._distances(q, [ep])[0]), ep)]
        for lc in range(self.max_level, 0, -1):
            entry = self._search_layer(q, entry, 1, lc, counter)[:1]
        found = self._search_layer(q, entry, ef_search, 0, counter)
        return KnnResult([(node, d) for d, node in found[:num_neighbors]], distance_evaluations=counter[0])

    def same_structure(self, other: 'HnswIndex') -> bool:
        """True when both graphs have identical parameters, levels and adjacency."""
        return (
            self.M == other.M
            and self.ef_construction == other.ef_construction
            and self.levels == other.levels
            and self.entry_point == other.entry_point
            and self.layers == other.layers
        )

    def __repr__(self):
        return f"HnswIndex(n={self.n}, M={self.M}, layers={len(self.layers)}, entry_point={self.entry_point})"


def build_index(corpus: EmbeddingCorpus, M: int = 16, ef_construction: int = 200, seed: int = 0) -> HnswIndex:
    """
    Build an HNSW index over every corpus row, inserting rows in id order.

    Raises:
        EmptyCorpus: If the corpus has no rows
    """
    if corpus.n == 0:
        raise EmptyCorpus("Cannot index an empty corpus")
    index = HnswIndex(M=M, ef_construction=ef_construction, seed=seed)
    index._vectors = _as_matrix(corpus)
    index.k = corpus.k
    index.corpus_hash = corpus.content_hash()
    for node in range(corpus.n):
        index._insert(node, index.draw_level(node))
    logger.info(f"Built index over {corpus.n} embeddings ({len(index.layers)} layers, M={M})")
    return index


def query(index: HnswIndex, vector, num_neighbors: int = 1, ef_search: int = 64) -> KnnResult:
    """Approximate kNN query; see HnswIndex.search."""
    return index.search(vector, num_neighbors, ef_search)


def nearest_token(index: HnswIndex, corpus: EmbeddingCorpus, embedding, ef_search: int = 64) -> str:
    """Surface of the corpus token whose vector is nearest to `embedding`."""
    vector = getattr(embedding, 'vector', embedding)
    if index.corpus_hash is not None and index.corpus_hash != corpus.content_hash():
        raise VocabularyMismatch("Index was built over a different embedding corpus")
    result = index.search(vector, 1, max(1, ef_search))
    return corpus.tokens[result.ids[0]]


def audit_index(index: HnswIndex) -> list[str]:
    """
    Check the structural invariants of a built index.

    Returns:
        List of violation messages; empty when the graph is sound.
    """
    problems = []
    n = index.n
    if n == 0:
        return problems
    for level, adjacency in enumerate(index.layers):
        expected = {node for node in range(n) if index.levels[node] >= level}
        if set(adjacency) != expected:
            problems.append(f"Layer {level}: node set does not match node levels")
        cap = index.degree_cap(level)
        for node, nbrs in adjacency.items():
            if len(nbrs) > cap:
                problems.append(f"Layer {level}: node {node} has degree {len(nbrs)} > {cap}")
            if len(set(nbrs)) != len(nbrs):
                problems.append(f"Layer {level}: node {node} has duplicate edges")
            for nb in nbrs:
                if nb == node:
                    problems.append(f"Layer {level}: node {node} has a self-loop")
                elif nb not in adjacency:
                    problems.append(f"Layer {level}: edge {node}-{nb} points outside the layer")
                elif node not in adjacency[nb]:
                    problems.append(f"Layer {level}: edge {node}->{nb} has no reverse edge")
    if index.entry_point is None or index.levels[index.entry_point] != max(index.levels):
        problems.append(f"Entry point {index.entry_point} does not have the maximum level")
    if len(index.layers) != max(index.levels) + 1:
        problems.append("Number of layers does not match the maximum node level")
    return problems


def is_connected(index: HnswIndex, level: int = 0) -> bool:
    """Whether every node of a layer is reachable from the entry point."""
    adjacency = index.layers[level]
    if not adjacency:
        return True
    start = index.entry_point
    seen = {start}
    stack = [start]
    while stack:
        for nb in adjacency[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(adjacency)


def save_index(index: HnswIndex, filename: str):
    """
    Serialize the graph structure (vectors stay in the corpus file).

    Layout: magic, u32 version, u32 header length, JSON header, then for each
    layer and each node of that layer in ascending id order a u32 count
    followed by that many u32 neighbor ids, all little-endian.
    """
    header = {
        'n': index.n,
        'k': index.k,
        'M': index.M,
        'ef_construction': index.ef_construction,
        'seed': index.seed,
        'levels': index.levels,
        'num_layers': len(index.layers),
        'entry_point': index.entry_point,
        'metric': METRIC,
        'corpus_hash': index.corpus_hash,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    ensure_parent_dir(filename)
    with open(filename, 'wb') as f:
        f.write(INDEX_MAGIC)
        f.write(struct.pack('<II', INDEX_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for adjacency in index.layers:
            for node in sorted(adjacency):
                nbrs = adjacency[node]
                f.write(struct.pack('<I', len(nbrs)))
                f.write(np.asarray(nbrs, dtype='<u4').tobytes())
    logger.info(f"Saved index to {filename}")


def load_index(filename: str, corpus: EmbeddingCorpus | None = None) -> HnswIndex:
    """
    Load an index written by `save_index`.

    Args:
        filename: Index file
        corpus: The corpus the index was built over; when given, vectors are
            attached and the corpus hash is checked

    Raises:
        CorruptFileError: Bad magic, truncation or trailing bytes (with offset)
        VersionMismatchError: Unsupported format version
        VocabularyMismatch: The corpus does not match the stored hash
    """
    with open(filename, 'rb') as f:
        data = f.read()

    def take(offset, size, what):
        if offset + size > len(data):
            raise CorruptFileError(f"Truncated while reading {what}", offset=offset)
        return data[offset:offset + size]

    if take(0, len(INDEX_MAGIC), 'magic') != INDEX_MAGIC:
        raise CorruptFileError("Not an index file (bad magic)", offset=0)
    offset = len(INDEX_MAGIC)
    version, header_len = struct.unpack('<II', take(offset, 8, 'version'))
    if version != INDEX_VERSION:
        raise VersionMismatchError(f"Index format version {version}, expected {INDEX_VERSION}", offset=offset)
    offset += 8
    try:
        header = json.loads(take(offset, header_len, 'header').decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFileError(f"Unreadable header: {e}", offset=offset)
    offset += header_len

    index = HnswIndex(M=header['M'], ef_construction=header['ef_construction'], seed=header['seed'])
    index.levels = [int(level) for level in header['levels']]
    index.entry_point = header['entry_point']
    index.k = header['k']
    index.corpus_hash = header['corpus_hash']
    for level in range(header['num_layers']):
        adjacency = {}
        for node in range(index.n):
            if index.levels[node] < level:
                continue
            (count,) = struct.unpack('<I', take(offset, 4, f'layer {level} node {node}'))
            offset += 4
            nbrs = np.frombuffer(take(offset, 4 * count, f'layer {level} node {node}'), dtype='<u4')
            offset += 4 * count
            adjacency[node] = [int(nb) for nb in nbrs]
        index.layers.append(adjacency)
    if offset != len(data):
        raise CorruptFileError(f"{len(data) - offset} unexpected trailing bytes", offset=offset)

    if corpus is not None:
        index.attach(corpus)
    logger.info(f"Loaded index over {index.n} embeddings from {filename}")
    return index
