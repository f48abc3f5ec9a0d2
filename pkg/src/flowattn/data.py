"""Line-delimited graph datasets, splitting, and synthetic generators.

A dataset directory holds ``records.jsonl`` (one JSON object per line) and
``manifest.json``. Record fields:

* ``id``: string identifier
* ``nodes``: list of feature vectors, all the same length
* ``edges``: list of ``[src, dst]`` index pairs
* ``directed``: false means every edge is used in both directions
* ``sources`` / ``targets``: node index lists
* ``label``: class index (int) or regression target (float)
* ``group``: optional string; records sharing a group stay in one split
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .expressivity import same_computation_tree
from .generators import random_true_dag
from .graph import Graph, computation_tree, make_undirected, topo_sort
from .models import Sample

RECORDS_FILE = "records.jsonl"
MANIFEST_FILE = "manifest.json"
RECORD_KEYS = ("id", "nodes", "edges", "directed", "sources", "targets", "label")


class DatasetParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class GraphRecord:
    id: str
    nodes: list
    edges: list
    directed: bool = True
    sources: list = field(default_factory=list)
    targets: list = field(default_factory=list)
    label: int | float = 0
    group: str | None = None

    def to_json(self) -> str:
        d = {k: getattr(self, k) for k in RECORD_KEYS}
        if self.group is not None:
            d["group"] = self.group
        return json.dumps(d, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "GraphRecord":
        missing = [k for k in RECORD_KEYS if k not in d]
        if missing:
            raise ValueError(f"missing fields {missing}")
        unknown = set(d) - set(RECORD_KEYS) - {"group"}
        if unknown:
            raise ValueError(f"unknown fields {sorted(unknown)}")
        rec = cls(str(d["id"]), [list(map(float, x)) for x in d["nodes"]],
                  [[int(u), int(v)] for u, v in d["edges"]], bool(d["directed"]),
                  [int(s) for s in d["sources"]], [int(t) for t in d["targets"]],
                  d["label"], d.get("group"))
        rec.check()
        return rec

    def check(self) -> None:
        dims = {len(x) for x in self.nodes}
        if len(dims) > 1:
            raise ValueError(f"node feature vectors have differing lengths {sorted(dims)}")
        n = len(self.nodes)
        for u, v in self.edges:
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge ({u}, {v}) out of range for {n} nodes")
        for idx in self.sources + self.targets:
            if not 0 <= idx < n:
                raise ValueError(f"source/target index {idx} out of range")
        if not isinstance(self.label, (int, float)) or isinstance(self.label, bool):
            raise ValueError(f"label must be a number, got {self.label!r}")

    @property
    def feature_dim(self) -> int:
        return len(self.nodes[0]) if self.nodes else 0

    def to_graph(self) -> Graph:
        feats = np.asarray(self.nodes, dtype=np.float64).reshape(len(self.nodes), -1)
        if self.directed:
            return Graph(len(self.nodes), tuple(map(tuple, self.edges)), feats,
                         frozenset(self.sources), frozenset(self.targets))
        return make_undirected(len(self.nodes), map(tuple, self.edges), feats,
                               self.sources, self.targets)

    def to_sample(self, need_dag: bool = False) -> Sample:
        g = self.to_graph()
        dag = topo_sort(g) if need_dag else None
        return Sample(dag.graph if dag is not None else g, self.label, dag)


@dataclass
class DatasetManifest:
    task: str = "classification"
    num_classes: int | None = 2
    feature_dim: int = 0
    split_ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    generator: str | None = None

    def __post_init__(self):
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        check_ratios(self.split_ratios)
        if self.task not in ("classification", "regression"):
            raise ValueError(f"task must be classification or regression, got {self.task!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d


@dataclass
class Dataset:
    records: list[GraphRecord]
    manifest: DatasetManifest

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records])


# io

def dumps_records(records: Sequence[GraphRecord]) -> str:
    return "".join(r.to_json() + "\n" for r in records)


def parse_records(text: str) -> list[GraphRecord]:
    records = []
    dim = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = GraphRecord.from_dict(json.loads(line))
        except (ValueError, TypeError, KeyError) as exc:
            raise DatasetParseError(lineno, str(exc)) from None
        if rec.nodes:
            if dim is None:
                dim = rec.feature_dim
            elif rec.feature_dim != dim:
                raise DatasetParseError(lineno, f"feature dimension {rec.feature_dim} differs "
                                                f"from earlier records ({dim})")
        records.append(rec)
    return records


def save_records(records: Sequence[GraphRecord], path: str | Path) -> None:
    Path(path).write_text(dumps_records(records))


def load_records(path: str | Path) -> list[GraphRecord]:
    return parse_records(Path(path).read_text())


def save(dataset: Dataset, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_records(dataset.records, d / RECORDS_FILE)
    (d / MANIFEST_FILE).write_text(json.dumps(dataset.manifest.to_dict(), indent=2) + "\n")
    return d


def load(path: str | Path) -> Dataset:
    """Load a dataset directory, or a bare ``.jsonl`` file with an optional sibling manifest."""
    p = Path(path)
    rec_path = p / RECORDS_FILE if p.is_dir() else p
    man_path = rec_path.parent / MANIFEST_FILE
    records = load_records(rec_path)
    if man_path.exists():
        manifest = DatasetManifest(**json.loads(man_path.read_text()))
    else:
        labels = [r.label for r in records]
        is_class = all(isinstance(x, int) for x in labels)
        manifest = DatasetManifest(
            "classification" if is_class else "regression",
            (max(labels) + 1 if labels else 2) if is_class else None,
            records[0].feature_dim if records else 0,
        )
    return Dataset(records, manifest)


# splitting

def check_ratios(ratios: Sequence[float]) -> None:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")


def _cut_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of n items."""
    raw = [r * n for r in ratios]
    sizes = [int(np.floor(x)) for x in raw]
    rest = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - sizes[k]), k))
    for k in order[:rest]:
        sizes[k] += 1
    return sizes


def _cut(items: list, sizes: list[int]) -> list[list]:
    out, start = [], 0
    for s in sizes:
        out.append(items[start:start + s])
        start += s
    return out


def split(dataset: Dataset | Sequence[GraphRecord], ratios: Sequence[float] = (0.8, 0.1, 0.1),
          seed: int = 0, stratify: bool = False) -> tuple[list, list, list]:
    """Seeded shuffle and contiguous cut into (train, val, test).

    Records that carry a ``group`` are kept together: groups are shuffled and
    cut instead of records. ``stratify`` cuts each class separately so every
    split holds each class within one sample of its share.
    """
    records = list(dataset.records if isinstance(dataset, Dataset) else dataset)
    ratios = tuple(float(r) for r in ratios)
    check_ratios(ratios)
    needed = sum(1 for r in ratios if r > 0)
    if len(records) < needed:
        raise ValueError(f"cannot split {len(records)} records into {needed} nonempty parts")
    rng = np.random.default_rng(seed)
    if any(r.group is not None for r in records):
        groups: dict[str, list[GraphRecord]] = {}
        for r in records:
            groups.setdefault(r.id if r.group is None else r.group, []).append(r)
        keys = sorted(groups)
        keys = [keys[i] for i in rng.permutation(len(keys))]
        parts = _cut(keys, _cut_sizes(len(keys), ratios))
        return tuple([r for k in part for r in groups[k]] for part in parts)
    if not stratify:
        shuffled = [records[i] for i in rng.permutation(len(records))]
        return tuple(_cut(shuffled, _cut_sizes(len(records), ratios)))
    out = ([], [], [])
    for c in sorted({r.label for r in records}):
        members = [r for r in records if r.label == c]
        members = [members[i] for i in rng.permutation(len(members))]
        for k, part in enumerate(_cut(members, _cut_sizes(len(members), ratios))):
            out[k].extend(part)
    return tuple([part[i] for i in rng.permutation(len(part))] for part in out)


# generators

RESISTOR_VALUES = (1.0, 2.0, 3.0, 5.0)


def _layered_circuit(rng: np.random.Generator, num_nodes: int, extra_edge_prob: float):
    """Input node 0, layers of component nodes, output node num_nodes - 1."""
    middle = num_nodes - 2
    num_layers = int(rng.integers(1, max(1, middle // 2) + 1))
    # widths: first layer >= 2, all >= 1, summing to middle
    widths = [2] + [1] * (num_layers - 1)
    for _ in range(middle - sum(widths)):
        widths[int(rng.integers(num_layers))] += 1
    layers, nxt = [], 1
    for w in widths:
        layers.append(list(range(nxt, nxt + w)))
        nxt += w
    out = num_nodes - 1
    edges = {(0, v) for v in layers[0]} | {(v, out) for v in layers[-1]}
    for a, b in zip(layers, layers[1:]):
        for v in b:
            edges.add((int(rng.choice(a)), v))
        for u in a:
            if not any((u, v) in edges for v in b):
                edges.add((u, int(rng.choice(b))))
        for u in a:
            for v in b:
                if rng.random() < extra_edge_prob:
                    edges.add((u, v))
    return sorted(edges)


def circuit_max_flow(num_nodes: int, edges, conductance: np.ndarray) -> float:
    """Largest edge current when a unit enters node 0 and splits by successor conductance."""
    succ: list[list[int]] = [[] for _ in range(num_nodes)]
    for u, v in edges:
        succ[u].append(v)
    inflow = np.zeros(num_nodes)
    inflow[0] = 1.0
    best = 0.0
    for u in range(num_nodes):  # generation order is topological
        if not succ[u]:
            continue
        total = sum(conductance[v] for v in succ[u])
        for v in succ[u]:
            psi = inflow[u] * conductance[v] / total
            inflow[v] += psi
            best = max(best, psi)
    return best


def gen_flow_classification(n: int, max_nodes: int, seed: int, *, min_nodes: int = 5,
                            extra_edge_prob: float = 0.3,
                            split_ratios=(0.8, 0.1, 0.1)) -> Dataset:
    """Layered resistor circuits labeled by whether their largest branch current is above the median.

    A unit current enters the input node and each node splits its inflow
    among its successors in proportion to their conductance 1 / r. Node
    features are a one-hot resistor value followed by is-input and is-output
    flags, so identical resistors share a feature vector.
    """
    if max_nodes < 4:
        raise ValueError("max_nodes must be >= 4")
    min_nodes = min(min_nodes, max_nodes)
    rng = np.random.default_rng(seed)
    P = len(RESISTOR_VALUES)
    drafts = []
    for k in range(n):
        size = int(rng.integers(min_nodes, max_nodes + 1))
        edges = _layered_circuit(rng, size, extra_edge_prob)
        kinds = rng.integers(P, size=size)
        feats = np.zeros((size, P + 2))
        feats[np.arange(1, size - 1), kinds[1:-1]] = 1.0
        feats[0, P] = 1.0
        feats[size - 1, P + 1] = 1.0
        conductance = 1.0 / np.asarray(RESISTOR_VALUES)[kinds]
        conductance[[0, size - 1]] = 1.0
        drafts.append((size, edges, feats, circuit_max_flow(size, edges, conductance)))
    threshold = float(np.median([d[3] for d in drafts])) if drafts else 0.0
    records = [
        GraphRecord(f"circuit-{k}", feats.tolist(), [list(e) for e in edges], True, [0],
                    [size - 1], int(mf > threshold))
        for k, (size, edges, feats, mf) in enumerate(drafts)
    ]
    manifest = DatasetManifest("classification", 2, P + 2, split_ratios, seed, "flow-classification")
    return Dataset(records, manifest)


def gen_pair_discrimination(n: int, seed: int, *, min_nodes: int = 4, max_nodes: int = 7,
                            edge_prob: float = 0.3, num_types: int = 3,
                            split_ratios=(0.8, 0.1, 0.1), check: bool = True) -> Dataset:
    """``2n`` records: each rooted DAG (label 0) next to its computation tree (label 1).

    Node features are one-hot node types shared across the dataset. Both
    records of a pair share a ``group`` so splits never separate them.
    """
    if n < 2:
        raise ValueError("gen_pair_discrimination needs n >= 2")
    rng = np.random.default_rng(seed)
    records = []
    for k in range(n):
        size = int(rng.integers(min_nodes, max_nodes + 1))
        types = np.eye(num_types)[rng.integers(num_types, size=size)]
        d = random_true_dag(size, rng, edge_prob, features=types)
        t = computation_tree(d)
        if check and not same_computation_tree(d, t):
            raise AssertionError("computation tree construction failed its isomorphism check")
        for label, dag in ((0, d), (1, t)):
            records.append(GraphRecord(
                f"pair-{k}-{'dag' if label == 0 else 'tree'}", dag.features.tolist(),
                [list(e) for e in dag.edges], True, sorted(dag.initial_nodes),
                sorted(dag.final_nodes), label, f"pair-{k}"))
    manifest = DatasetManifest("classification", 2, num_types, split_ratios, seed,
                               "pair-discrimination")
    return Dataset(records, manifest)


GENERATORS = {"flow-classification": gen_flow_classification,
              "pair-discrimination": gen_pair_discrimination}
