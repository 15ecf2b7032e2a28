"""On-disk formats and the deterministic synthetic benchmark world.

Formats owned here: the JSON dataset manifest, the binary region-feature
container (magic FGPF), the binary checkpoint container (magic FGPC),
newline-delimited split files, the edge-list graph file, and the
JSON-lines phrase sidecar. Every reader/writer pair round-trips
bit-exactly, and the synthetic generator is a pure function of its spec.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, VersionError
from .semantic import WordVectorTable, extract_phrases, load_word_vectors

REGION_MAGIC = b"FGPF"
REGION_VERSION = 1
CHECKPOINT_MAGIC = b"FGPC"
CHECKPOINT_VERSION = 1

ATTRIBUTE_STEMS = (
    "pattern", "shade", "build", "trim", "crest", "gait", "sheen", "plume",
)


# ---------------------------------------------------------------------------
# region-feature container


def write_region_features(path, features, labels) -> None:
    """Write samples as FGPF: header counts, then per sample a class id
    and the R x d_f grid as little-endian float32."""
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.uint32)
    if features.ndim != 3:
        raise DomainError(f"expected (N, R, d_f) features, got {features.shape}")
    if labels.shape[0] != features.shape[0]:
        raise DomainError(f"{labels.shape[0]} labels vs {features.shape[0]} samples")
    n, r, d_f = features.shape
    with open(path, "wb") as fh:
        fh.write(REGION_MAGIC)
        fh.write(struct.pack("<HIII", REGION_VERSION, n, r, d_f))
        for i in range(n):
            fh.write(struct.pack("<I", int(labels[i])))
            fh.write(features[i].astype("<f4").tobytes())


def read_region_features(path):
    """Read an FGPF container; returns (features float64, labels int64, (R, d_f)).

    Values are widened to float64 in memory; writing them back is
    bit-exact because they remain float32-representable.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != REGION_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 18:
        raise FormatError(f"{path}: truncated header at offset {len(raw)}")
    version, n, r, d_f = struct.unpack_from("<HIII", raw, 4)
    if version != REGION_VERSION:
        raise VersionError(f"{path}: region file version {version}, expected {REGION_VERSION}")
    offset = 18
    per_sample = 4 + 4 * r * d_f
    expected = offset + n * per_sample
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload length {len(raw)} != expected {expected} "
            f"(truncation at offset {min(len(raw), expected)})"
        )
    labels = np.empty(n, dtype=np.int64)
    features = np.empty((n, r, d_f), dtype=np.float64)
    for i in range(n):
        (labels[i],) = struct.unpack_from("<I", raw, offset)
        offset += 4
        grid = np.frombuffer(raw, dtype="<f4", count=r * d_f, offset=offset)
        features[i] = grid.reshape(r, d_f).astype(np.float64)
        offset += 4 * r * d_f
    return features, labels, (r, d_f)


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(arrays: dict, meta: dict, path) -> None:
    """Versioned binary container: JSON header plus raw array payloads.

    Arrays are stored under sorted names with their dtype and shape, so
    identical inputs always serialize to identical bytes.
    """
    names = sorted(arrays)
    entries = []
    payloads = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        payloads.append(arr.astype(dt, copy=False).tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt.str})
    header = json.dumps({"meta": meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (arrays, meta)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 10:
        raise FormatError(f"{path}: truncated header at offset {len(raw)}")
    version, header_len = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    offset = 10
    try:
        header = json.loads(raw[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad checkpoint header: {exc}") from None
    offset += header_len
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = dt.itemsize * count
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated payload at offset {offset}")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes at offset {offset}")
    return arrays, header["meta"]


# ---------------------------------------------------------------------------
# manifest and dataset loading


@dataclass
class ClassEntry:
    class_id: int
    name: str
    seen: bool


@dataclass
class DatasetManifest:
    classes: list[ClassEntry]
    files: dict[str, Path]
    d_c: int
    d_f: int
    r: int
    grid_shape: tuple[int, int] | None
    path: Path

    @property
    def seen_ids(self) -> list[int]:
        return sorted(c.class_id for c in self.classes if c.seen)

    @property
    def unseen_ids(self) -> list[int]:
        return sorted(c.class_id for c in self.classes if not c.seen)

    @property
    def class_order(self) -> list[int]:
        """Canonical node order: seen classes first, ids ascending."""
        return self.seen_ids + self.unseen_ids


def _read_split(path) -> list[int]:
    ids = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            ids.append(int(line))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: not a class id: {line!r}") from None
    return ids


def load_manifest(path) -> DatasetManifest:
    """Parse the manifest JSON and validate cross-file consistency eagerly."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    for key in ("classes", "files", "dims"):
        if key not in doc:
            raise FormatError(f"{path}: missing manifest key {key!r}")
    base = path.parent
    files = {}
    for role in ("word_vectors", "phrases", "graph", "region_features",
                 "train_split", "test_split"):
        if role not in doc["files"]:
            raise FormatError(f"{path}: missing file entry {role!r}")
        files[role] = base / doc["files"][role]
        if not files[role].exists():
            raise FormatError(f"{path}: referenced file missing: {files[role]}")
    dims = doc["dims"]
    for key in ("d_c", "d_f", "R"):
        if key not in dims:
            raise FormatError(f"{path}: missing dimension {key!r}")

    classes = []
    ids = set()
    for entry in doc["classes"]:
        cid = int(entry["id"])
        if cid in ids:
            raise FormatError(f"{path}: duplicate class id {cid}")
        ids.add(cid)
        classes.append(ClassEntry(class_id=cid, name=str(entry["name"]),
                                  seen=bool(entry["seen"])))

    train_ids, test_ids = set(_read_split(files["train_split"])), set(_read_split(files["test_split"]))
    overlap = sorted(train_ids & test_ids)
    if overlap:
        raise DomainError(
            f"train and test class sets must be disjoint; both contain {overlap}"
        )
    flagged_seen = {c.class_id for c in classes if c.seen}
    flagged_unseen = ids - flagged_seen
    if train_ids != flagged_seen or test_ids != flagged_unseen:
        raise DomainError(
            "split files disagree with the class table's seen/unseen flags"
        )

    _, labels, (r, d_f) = read_region_features(files["region_features"])
    if r != int(dims["R"]) or d_f != int(dims["d_f"]):
        raise DomainError(
            f"region file has R={r}, d_f={d_f} but manifest declares "
            f"R={dims['R']}, d_f={dims['d_f']}"
        )
    stray = sorted(set(labels.tolist()) - ids)
    if stray:
        raise DomainError(f"samples labeled with unknown classes {stray}")

    grid_shape = tuple(doc["grid_shape"]) if doc.get("grid_shape") else None
    if grid_shape is not None and grid_shape[0] * grid_shape[1] != r:
        raise DomainError(f"grid shape {grid_shape} does not cover R={r}")

    return DatasetManifest(
        classes=classes, files=files, d_c=int(dims["d_c"]), d_f=int(dims["d_f"]),
        r=int(dims["R"]), grid_shape=grid_shape, path=path,
    )


def _read_graph_edges(path, known_ids) -> list[tuple[int, int]]:
    edges = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'id id', got {line!r}")
        a, b = int(parts[0]), int(parts[1])
        if a not in known_ids or b not in known_ids:
            raise DomainError(f"{path}:{lineno}: edge {a}-{b} references unknown class")
        edges.append((a, b))
    return edges


def _read_phrase_sidecar(path):
    descriptions, phrases = {}, {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        cid = int(doc["class_id"])
        descriptions[cid] = str(doc.get("description", ""))
        if doc.get("phrases"):
            phrases[cid] = [str(p).lower() for p in doc["phrases"]]
    return descriptions, phrases


@dataclass
class LoadedDataset:
    """Everything a pipeline run needs, loaded and cross-validated."""

    manifest: DatasetManifest
    class_ids: list[int]  # canonical order, seen first
    id_to_pos: dict[int, int]
    names: dict[int, str]
    seen_ids: list[int]
    unseen_ids: list[int]
    word_table: WordVectorTable
    descriptions: dict[int, str]
    phrases_by_class: dict[int, list[str]]
    adjacency: np.ndarray  # (C, C), canonical order, self-loops included
    features: np.ndarray  # (N, R, d_f)
    labels: np.ndarray  # (N,) class ids
    grid_shape: tuple[int, int] | None = None

    @property
    def d_f(self) -> int:
        return self.features.shape[2]

    @property
    def r(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    def sample_indices(self, split: str) -> np.ndarray:
        """Indices of samples whose label falls in the named split."""
        if split == "train":
            wanted = set(self.seen_ids)
        elif split == "test":
            wanted = set(self.unseen_ids)
        elif split == "all":
            wanted = set(self.class_ids)
        else:
            raise DomainError(f"unknown split {split!r}")
        mask = np.array([int(lab) in wanted for lab in self.labels])
        return np.flatnonzero(mask)


def load_dataset(manifest_path) -> LoadedDataset:
    """Load every file referenced by a manifest into memory.

    Phrase lists come from the sidecar when present and fall back to the
    unigram/bigram extractor over the description text.
    """
    manifest = load_manifest(manifest_path)
    order = manifest.class_order
    id_to_pos = {cid: i for i, cid in enumerate(order)}
    names = {c.class_id: c.name for c in manifest.classes}

    word_table = load_word_vectors(manifest.files["word_vectors"])
    if word_table.dim != manifest.d_c:
        raise DomainError(
            f"word vectors have dimension {word_table.dim} but manifest declares {manifest.d_c}"
        )
    descriptions, phrases = _read_phrase_sidecar(manifest.files["phrases"])
    phrases_by_class = {}
    for cid in order:
        if cid in phrases:
            phrases_by_class[cid] = phrases[cid]
        elif cid in descriptions and descriptions[cid]:
            phrases_by_class[cid] = extract_phrases(descriptions[cid])
        else:
            raise DomainError(f"class {cid} has neither phrases nor a description")

    c = len(order)
    adjacency = np.eye(c, dtype=np.float64)
    for a, b in _read_graph_edges(manifest.files["graph"], set(order)):
        pa, pb = id_to_pos[a], id_to_pos[b]
        adjacency[pa, pb] = adjacency[pb, pa] = 1.0

    features, labels, _ = read_region_features(manifest.files["region_features"])
    return LoadedDataset(
        manifest=manifest, class_ids=order, id_to_pos=id_to_pos, names=names,
        seen_ids=manifest.seen_ids, unseen_ids=manifest.unseen_ids,
        word_table=word_table, descriptions=descriptions,
        phrases_by_class=phrases_by_class, adjacency=adjacency,
        features=features, labels=labels, grid_shape=manifest.grid_shape,
    )


# ---------------------------------------------------------------------------
# synthetic compositional world


@dataclass
class SyntheticWorldSpec:
    """Latent recipe for the benchmark world.

    Classes are tuples of attribute values. Each value owns a unit signal
    direction in feature space and a word token whose vector clusters by
    attribute. Per sample, each attribute's signal lands in a few random
    regions on top of Gaussian noise, so mean pooling dilutes what
    attention can recover. Unseen classes are novel tuples of values that
    all occur among the seen classes.
    """

    n_attributes: int = 3
    values_per_attribute: int = 3
    n_seen: int = 18
    n_unseen: int = 6
    samples_per_class: int = 40
    signal_strength: float = 3.0
    noise_scale: float = 1.0
    regions_per_attribute: int = 2
    r: int = 16
    d_f: int = 32
    d_c: int = 16
    word_jitter: float = 0.6
    seed: int = 0


@dataclass
class SyntheticWorld:
    """Generator output: the manifest path plus the latent ground truth
    (kept in memory for oracle scoring, never written to disk)."""

    manifest_path: Path
    class_tuples: dict[int, tuple[int, ...]]
    signal_directions: np.ndarray  # (A, V, d_f)
    value_tokens: list[list[str]]  # [attribute][value]
    token_vectors: dict[str, np.ndarray]


def _choose_tuples(spec: SyntheticWorldSpec, rng: np.random.Generator):
    """Seen tuples covering every attribute value, then unseen novel tuples."""
    a, v = spec.n_attributes, spec.values_per_attribute
    universe = list(itertools.product(range(v), repeat=a))
    if spec.n_seen + spec.n_unseen > len(universe):
        raise DomainError(
            f"{spec.n_seen}+{spec.n_unseen} classes requested but only "
            f"{len(universe)} distinct attribute tuples exist"
        )
    order = [universe[i] for i in rng.permutation(len(universe))]
    seen: list[tuple[int, ...]] = []
    # cover every (attribute, value) first so unseen tuples stay compositional
    for ai in range(a):
        for vi in range(v):
            if any(t[ai] == vi for t in seen):
                continue
            pick = next((t for t in order if t not in seen and t[ai] == vi), None)
            if pick is None:
                raise DomainError("attribute values cannot all be covered by seen classes")
            seen.append(pick)
    if len(seen) > spec.n_seen:
        raise DomainError(
            f"covering all attribute values needs {len(seen)} seen classes, "
            f"but only {spec.n_seen} were requested"
        )
    for t in order:
        if len(seen) == spec.n_seen:
            break
        if t not in seen:
            seen.append(t)
    remaining = [t for t in order if t not in seen]
    unseen = remaining[: spec.n_unseen]
    if len(unseen) < spec.n_unseen:
        raise DomainError("not enough distinct tuples left for the unseen split")
    return seen, unseen


def _orthonormal_rows(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if n > dim:
        raise DomainError(f"cannot draw {n} orthonormal directions in dimension {dim}")
    g = rng.normal(size=(dim, n))
    q, r = np.linalg.qr(g)
    return (q * np.sign(np.diag(r))).T


def _format_float(x: float) -> str:
    return repr(float(x))


def generate_synthetic_world(spec: SyntheticWorldSpec, out_dir) -> SyntheticWorld:
    """Write a complete dataset under `out_dir`; pure function of the spec."""
    if spec.regions_per_attribute < 1 or spec.regions_per_attribute > spec.r:
        raise DomainError(f"regions_per_attribute must be in [1, {spec.r}]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    a_count, v_count = spec.n_attributes, spec.values_per_attribute

    seen_tuples, unseen_tuples = _choose_tuples(spec, rng)
    tuples = seen_tuples + unseen_tuples
    class_ids = list(range(len(tuples)))
    seen_ids = class_ids[: len(seen_tuples)]
    unseen_ids = class_ids[len(seen_tuples):]
    class_tuples = dict(zip(class_ids, tuples))

    # word vectors: one well-separated base per attribute, jittered per value
    stems = [
        ATTRIBUTE_STEMS[i] if i < len(ATTRIBUTE_STEMS) else f"attr{i}"
        for i in range(a_count)
    ]
    value_tokens = [[f"{stems[ai]}{vi}" for vi in range(v_count)] for ai in range(a_count)]
    bases = _orthonormal_rows(a_count, spec.d_c, rng)
    token_vectors: dict[str, np.ndarray] = {}
    for ai in range(a_count):
        for vi in range(v_count):
            jitter = rng.normal(size=spec.d_c)
            jitter /= np.linalg.norm(jitter)
            vec = bases[ai] + spec.word_jitter * jitter
            token_vectors[value_tokens[ai][vi]] = vec / np.linalg.norm(vec)

    # visual signal directions, mutually orthogonal
    directions = _orthonormal_rows(a_count * v_count, spec.d_f, rng)
    signal_directions = directions.reshape(a_count, v_count, spec.d_f)

    # samples: noise everywhere, each attribute's signal in a few regions
    n_samples = len(class_ids) * spec.samples_per_class
    features = np.empty((n_samples, spec.r, spec.d_f), dtype=np.float64)
    labels = np.empty(n_samples, dtype=np.int64)
    idx = 0
    for cid in class_ids:
        t = class_tuples[cid]
        for _ in range(spec.samples_per_class):
            grid = spec.noise_scale * rng.normal(size=(spec.r, spec.d_f))
            for ai in range(a_count):
                sites = rng.choice(spec.r, size=spec.regions_per_attribute, replace=False)
                grid[sites] += spec.signal_strength * signal_directions[ai, t[ai]]
            features[idx] = grid
            labels[idx] = cid
            idx += 1

    # graph: edge when two classes share at least one attribute value
    edges = []
    for i, ci in enumerate(class_ids):
        for cj in class_ids[i + 1:]:
            if any(x == y for x, y in zip(class_tuples[ci], class_tuples[cj])):
                edges.append((ci, cj))

    names = {cid: "-".join(value_tokens[ai][class_tuples[cid][ai]] for ai in range(a_count))
             for cid in class_ids}

    with open(out / "word_vectors.txt", "w", encoding="utf-8") as fh:
        for token, vec in token_vectors.items():
            fh.write(token + " " + " ".join(_format_float(x) for x in vec) + "\n")
    with open(out / "phrases.jsonl", "w", encoding="utf-8") as fh:
        for cid in class_ids:
            tokens = [value_tokens[ai][class_tuples[cid][ai]] for ai in range(a_count)]
            fh.write(json.dumps({
                "class_id": cid,
                "name": names[cid],
                "description": " ".join(tokens),
                "phrases": tokens,
            }, sort_keys=True) + "\n")
    with open(out / "graph.txt", "w", encoding="utf-8") as fh:
        for a, b in edges:
            fh.write(f"{a} {b}\n")
    (out / "train_split.txt").write_text(
        "".join(f"{cid}\n" for cid in seen_ids), encoding="utf-8")
    (out / "test_split.txt").write_text(
        "".join(f"{cid}\n" for cid in unseen_ids), encoding="utf-8")
    write_region_features(out / "regions.fgpf", features, labels)

    side = int(round(np.sqrt(spec.r)))
    grid_shape = [side, spec.r // side] if side * (spec.r // side) == spec.r else None
    manifest_doc = {
        "classes": [
            {"id": cid, "name": names[cid], "seen": cid in set(seen_ids)}
            for cid in class_ids
        ],
        "files": {
            "word_vectors": "word_vectors.txt",
            "phrases": "phrases.jsonl",
            "graph": "graph.txt",
            "region_features": "regions.fgpf",
            "train_split": "train_split.txt",
            "test_split": "test_split.txt",
        },
        "dims": {"d_c": spec.d_c, "d_f": spec.d_f, "R": spec.r},
        "grid_shape": grid_shape,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(
        json.dumps(manifest_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    return SyntheticWorld(
        manifest_path=manifest_path, class_tuples=class_tuples,
        signal_directions=signal_directions, value_tokens=value_tokens,
        token_vectors=token_vectors,
    )


def oracle_scores(world: SyntheticWorld, features: np.ndarray,
                  candidate_ids) -> np.ndarray:
    """Score samples against classes using the latent signal directions.

    For each candidate class, each attribute contributes the best response
    of its value's direction over the sample's regions. This is the upper
    reference for what region-level evidence supports.
    """
    cand = list(candidate_ids)
    scores = np.zeros((features.shape[0], len(cand)))
    for j, cid in enumerate(cand):
        t = world.class_tuples[cid]
        for ai, vi in enumerate(t):
            resp = features @ world.signal_directions[ai, vi]  # (N, R)
            scores[:, j] += resp.max(axis=1)
    return scores
