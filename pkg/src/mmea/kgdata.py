"""Knowledge graphs, per-modality feature matrices and alignment tasks.

File formats
------------
* triples: ``head<TAB>relation<TAB>tail`` per line, integer ids or labels
  resolved through ``label<TAB>id`` vocab files.
* features: binary ``MMEA`` files (magic, then little-endian u32 version,
  rows, cols, then float32 row-major data) with an optional ``.mask``
  companion holding one 0/1 byte per row. Plain TSV is accepted as well.
* pivots: ``source_id<TAB>target_id[<TAB>score]``.
* task manifest: ``key = value`` lines, ``#`` starts a comment.
"""

from __future__ import annotations

import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mmea.numcore import DTYPE

log = logging.getLogger(__name__)

MODALITIES = ("image", "relation", "attribute", "surface")
MAGIC = b"MMEA"
FORMAT_VERSION = 1


class TaskError(ValueError):
    """Invalid or inconsistent task input."""


class Vocab:
    """Bidirectional label <-> id table with dense ids ``0..n-1``."""

    def __init__(self, labels=()):
        self.labels = []
        self.index = {}
        for lab in labels:
            self.add(lab)

    def add(self, label):
        label = str(label)
        if label not in self.index:
            self.index[label] = len(self.labels)
            self.labels.append(label)
        return self.index[label]

    def __len__(self):
        return len(self.labels)

    def __contains__(self, label):
        return str(label) in self.index

    def id_of(self, label):
        return self.index[str(label)]

    def label_of(self, i):
        return self.labels[i]

    @classmethod
    def range(cls, n):
        return cls(str(i) for i in range(n))


@dataclass
class KnowledgeGraph:
    entity_vocab: Vocab
    relation_vocab: Vocab
    triples: np.ndarray  # (T, 3) int: head, relation, tail
    degree: np.ndarray = field(init=False)

    def __post_init__(self):
        self.triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        n = len(self.entity_vocab)
        if len(self.triples):
            ents = self.triples[:, [0, 2]]
            if ents.min() < 0 or ents.max() >= n:
                raise TaskError("triple references an entity id outside the vocabulary")
            rels = self.triples[:, 1]
            if rels.min() < 0 or rels.max() >= len(self.relation_vocab):
                raise TaskError("triple references a relation id outside the vocabulary")
        deg = np.zeros(n, dtype=np.int64)
        np.add.at(deg, self.triples[:, 0], 1)
        np.add.at(deg, self.triples[:, 2], 1)
        self.degree = deg

    @property
    def n_entities(self):
        return len(self.entity_vocab)

    def edges(self):
        """Undirected entity pairs, one per triple (relation type dropped)."""
        return self.triples[:, [0, 2]]


@dataclass
class ModalityFeatures:
    name: str
    matrix: np.ndarray
    present: np.ndarray

    def __post_init__(self):
        if self.name not in MODALITIES:
            raise TaskError(f"unknown modality {self.name!r}")
        self.matrix = np.asarray(self.matrix, dtype=DTYPE)
        if self.matrix.ndim != 2:
            raise TaskError(f"{self.name} features must be 2-D")
        self.present = np.asarray(self.present, dtype=bool).reshape(-1)
        if self.present.shape[0] != self.matrix.shape[0]:
            raise TaskError(f"{self.name} mask length does not match row count")

    @property
    def coverage(self):
        return float(self.present.mean()) if len(self.present) else 0.0


@dataclass
class AlignmentTask:
    source: KnowledgeGraph
    target: KnowledgeGraph
    features: dict  # modality -> (source ModalityFeatures, target ModalityFeatures)
    train_pivots: np.ndarray
    test_pivots: np.ndarray

    def __post_init__(self):
        self.train_pivots = _as_pairs(self.train_pivots)
        self.test_pivots = _as_pairs(self.test_pivots)
        self.validate()

    @property
    def modalities(self):
        return [m for m in MODALITIES if m in self.features]

    def coverage(self):
        return {m: (s.coverage, t.coverage) for m, (s, t) in self.features.items()}

    def validate(self):
        ns, nt = self.source.n_entities, self.target.n_entities
        for m, (fs, ft) in self.features.items():
            if fs.matrix.shape[0] != ns or ft.matrix.shape[0] != nt:
                raise TaskError(f"{m} features: row count does not match entity count")
            if fs.matrix.shape[1] != ft.matrix.shape[1]:
                raise TaskError(f"{m} features: width differs between graphs")
        for label, pairs in (("train", self.train_pivots), ("test", self.test_pivots)):
            check_pivots(pairs, ns, nt, label)
        train = set(map(tuple, self.train_pivots.tolist()))
        if train & set(map(tuple, self.test_pivots.tolist())):
            raise TaskError("train and test pivots overlap")

    def gold_pairs(self):
        return np.concatenate([self.train_pivots, self.test_pivots])

    def without(self, modalities):
        """Copy of the task with the given feature modalities removed."""
        feats = {m: v for m, v in self.features.items() if m not in set(modalities)}
        return AlignmentTask(self.source, self.target, feats, self.train_pivots, self.test_pivots)


def _as_pairs(pairs):
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def check_pivots(pairs, ns, nt, label="pivot"):
    pairs = _as_pairs(pairs)
    if len(pairs) == 0:
        return pairs
    if pairs[:, 0].min() < 0 or pairs[:, 0].max() >= ns or \
            pairs[:, 1].min() < 0 or pairs[:, 1].max() >= nt:
        raise TaskError(f"{label}: pivot id out of range")
    if len(np.unique(pairs[:, 0])) != len(pairs) or len(np.unique(pairs[:, 1])) != len(pairs):
        raise TaskError(f"{label}: duplicate pivot entity")
    return pairs


def degree_sum(task, pair):
    s, t = pair
    if not (0 <= s < task.source.n_entities and 0 <= t < task.target.n_entities):
        raise TaskError("id out of range")
    return int(task.source.degree[s] + task.target.degree[t])


def impute_missing_images(features, rng_seed):
    """Fill absent rows with draws from a per-dimension normal fit to present rows."""
    present = features.present
    if not present.any():
        raise TaskError(f"{features.name}: no present rows to impute from")
    if present.all():
        return ModalityFeatures(features.name, features.matrix.copy(), present.copy())
    observed = features.matrix[present]
    mu = observed.mean(axis=0)
    sd = observed.std(axis=0)
    rng = np.random.default_rng(rng_seed)
    out = features.matrix.copy()
    n_missing = int((~present).sum())
    out[~present] = mu + sd * rng.standard_normal((n_missing, out.shape[1]))
    return ModalityFeatures(features.name, out, present.copy())


# ---------------------------------------------------------------- feature IO

def write_matrix(path, matrix, mask=None):
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    rows, cols = matrix.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, rows, cols))
        fh.write(matrix.tobytes())
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (rows,):
            raise TaskError("mask length must equal row count")
        Path(str(path) + ".mask").write_bytes(mask.astype(np.uint8).tobytes())


def read_matrix(path, expected_cols=None):
    """Read a feature matrix (binary or TSV). Returns ``(matrix, mask or None)``."""
    path = Path(path)
    if not path.exists():
        raise TaskError(f"missing file: {path}")
    raw = path.read_bytes()
    if raw[:4] == MAGIC:
        if len(raw) < 16:
            raise TaskError(f"{path}: truncated header")
        version, rows, cols = struct.unpack("<III", raw[4:16])
        if version != FORMAT_VERSION:
            raise TaskError(f"{path}: unsupported version {version}")
        if len(raw) != 16 + 4 * rows * cols:
            raise TaskError(f"{path}: payload size does not match {rows}x{cols}")
        matrix = np.frombuffer(raw, dtype="<f4", offset=16).reshape(rows, cols).astype(DTYPE)
    else:
        try:
            text = raw.decode("utf-8")
            rows_ = [[float(v) for v in line.split("\t")]
                     for line in text.splitlines() if line.strip()]
        except (UnicodeDecodeError, ValueError) as exc:
            raise TaskError(f"{path}: malformed feature file ({exc})") from exc
        if len({len(r) for r in rows_}) > 1:
            raise TaskError(f"{path}: ragged rows")
        matrix = np.array(rows_, dtype=DTYPE).reshape(len(rows_), -1)
    if not np.all(np.isfinite(matrix)):
        raise TaskError(f"{path}: non-finite values")
    if expected_cols is not None and matrix.shape[1] != expected_cols:
        raise TaskError(f"{path}: declared width {expected_cols} but file has {matrix.shape[1]}")
    mask = None
    mask_path = Path(str(path) + ".mask")
    if mask_path.exists():
        mbytes = np.frombuffer(mask_path.read_bytes(), dtype=np.uint8)
        if mbytes.shape[0] != matrix.shape[0] or np.any(mbytes > 1):
            raise TaskError(f"{mask_path}: malformed mask")
        mask = mbytes.astype(bool)
    return matrix, mask


# ------------------------------------------------------------ text formats

def read_vocab(path):
    path = Path(path)
    if not path.exists():
        raise TaskError(f"missing file: {path}")
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise TaskError(f"{path}:{lineno}: expected label<TAB>id")
        try:
            pairs.append((parts[0], int(parts[1])))
        except ValueError:
            raise TaskError(f"{path}:{lineno}: id is not an integer") from None
    ids = sorted(i for _, i in pairs)
    if ids != list(range(len(ids))):
        raise TaskError(f"{path}: ids must be dense 0..n-1")
    labels = [None] * len(pairs)
    for lab, i in pairs:
        labels[i] = lab
    return Vocab(labels)


def write_vocab(path, vocab):
    with open(path, "w", encoding="utf-8") as fh:
        for i, lab in enumerate(vocab.labels):
            fh.write(f"{lab}\t{i}\n")


def read_triples(path, entity_vocab=None, relation_vocab=None):
    """Parse a triple file into an int array, resolving labels when vocabs are given."""
    path = Path(path)
    if not path.exists():
        raise TaskError(f"missing file: {path}")
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise TaskError(f"{path}:{lineno}: expected head<TAB>relation<TAB>tail")
        h, r, t = parts
        try:
            out.append((_resolve(h, entity_vocab), _resolve(r, relation_vocab),
                        _resolve(t, entity_vocab)))
        except (KeyError, ValueError):
            raise TaskError(f"{path}:{lineno}: unknown entity or relation") from None
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def _resolve(token, vocab):
    if vocab is not None and token in vocab:
        return vocab.id_of(token)
    return int(token)


def write_triples(path, triples):
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in np.asarray(triples).tolist():
            fh.write(f"{h}\t{r}\t{t}\n")


def read_pivots(path):
    path = Path(path)
    if not path.exists():
        raise TaskError(f"missing file: {path}")
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise TaskError(f"{path}:{lineno}: expected source_id<TAB>target_id")
        try:
            out.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise TaskError(f"{path}:{lineno}: pivot ids must be integers") from None
    return _as_pairs(out)


def write_pivots(path, pairs, scores=None):
    with open(path, "w", encoding="utf-8") as fh:
        for k, (s, t) in enumerate(np.asarray(pairs).reshape(-1, 2).tolist()):
            if scores is None:
                fh.write(f"{s}\t{t}\n")
            else:
                fh.write(f"{s}\t{t}\t{float(scores[k]):.6f}\n")


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise TaskError(f"missing file: {path}")
    cfg = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise TaskError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        cfg[key.strip()] = value.strip()
    return cfg


def write_config(path, cfg):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in cfg.items():
            fh.write(f"{k} = {v}\n")


# ------------------------------------------------------ count-vector helpers

def relation_count_features(kg, top_d):
    """Per-entity counts of incident relations over the ``top_d`` most frequent ones.

    Stand-in for externally prepared relation features.
    """
    freq = Counter(kg.triples[:, 1].tolist())
    top = [r for r, _ in sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))[:top_d]]
    col = {r: j for j, r in enumerate(top)}
    out = np.zeros((kg.n_entities, top_d), dtype=DTYPE)
    for h, r, t in kg.triples.tolist():
        j = col.get(r)
        if j is not None:
            out[h, j] += 1
            out[t, j] += 1
    return out


def attribute_count_features(attr_triples, n_entities, top_d):
    """Per-entity counts of attribute keys over the ``top_d`` most frequent keys.

    ``attr_triples`` holds ``(entity_id, key, value)`` rows; values are ignored.
    Like :func:`relation_count_features`, a stand-in for prepared features.
    """
    keys = [k for _, k, _ in attr_triples]
    freq = Counter(keys)
    top = [k for k, _ in sorted(freq.items(), key=lambda kv: (-kv[1], str(kv[0])))[:top_d]]
    col = {k: j for j, k in enumerate(top)}
    out = np.zeros((n_entities, top_d), dtype=DTYPE)
    for e, k, _ in attr_triples:
        j = col.get(k)
        if j is not None:
            out[int(e), j] += 1
    return out


def _read_attr_triples(path, entity_vocab):
    path = Path(path)
    if not path.exists():
        raise TaskError(f"missing file: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise TaskError(f"{path}:{lineno}: expected entity<TAB>key[<TAB>value]")
        try:
            e = _resolve(parts[0], entity_vocab)
        except (KeyError, ValueError):
            raise TaskError(f"{path}:{lineno}: unknown entity") from None
        rows.append((e, parts[1], parts[2] if len(parts) > 2 else ""))
    return rows


# --------------------------------------------------------------- manifest

def _path(cfg, key, base):
    p = Path(cfg[key])
    return p if p.is_absolute() else base / p


def _load_graph(cfg, side, base):
    ent_vocab = rel_vocab = None
    if f"{side}_entities" in cfg:
        ent_vocab = read_vocab(_path(cfg, f"{side}_entities", base))
    if f"{side}_relations" in cfg:
        rel_vocab = read_vocab(_path(cfg, f"{side}_relations", base))
    key = f"{side}_triples"
    if key not in cfg:
        raise TaskError(f"config is missing {key}")
    triples = read_triples(_path(cfg, key, base), ent_vocab, rel_vocab)
    if ent_vocab is None:
        if f"{side}_num_entities" in cfg:
            n = int(cfg[f"{side}_num_entities"])
        else:
            n = int(triples[:, [0, 2]].max()) + 1 if len(triples) else 0
        ent_vocab = Vocab.range(n)
    if rel_vocab is None:
        n_rel = int(triples[:, 1].max()) + 1 if len(triples) else 0
        rel_vocab = Vocab.range(n_rel)
    return KnowledgeGraph(ent_vocab, rel_vocab, triples)


def _load_modality(cfg, m, side, kg, base):
    key = f"{m}_{side}"
    if key not in cfg:
        return None
    declared = int(cfg[f"{m}_dim"]) if f"{m}_dim" in cfg else None
    if cfg[key] == "auto":
        if m == "relation":
            if declared is None:
                raise TaskError("relation = auto needs relation_dim")
            matrix = relation_count_features(kg, declared)
            return ModalityFeatures(m, matrix, np.ones(kg.n_entities, bool))
        raise TaskError(f"{key} = auto is only supported for relation features")
    if m == "attribute" and cfg[key].endswith(".tsv") and cfg.get("attribute_format") == "triples":
        if declared is None:
            raise TaskError("attribute triples need attribute_dim")
        rows = _read_attr_triples(_path(cfg, key, base), kg.entity_vocab)
        matrix = attribute_count_features(rows, kg.n_entities, declared)
        return ModalityFeatures(m, matrix, np.ones(kg.n_entities, bool))
    matrix, mask = read_matrix(_path(cfg, key, base), declared)
    if matrix.shape[0] != kg.n_entities:
        raise TaskError(f"{key}: {matrix.shape[0]} rows but graph has {kg.n_entities} entities")
    if mask is None:
        mask = np.ones(matrix.shape[0], dtype=bool)
    return ModalityFeatures(m, matrix, mask)


def load_task(config, base_dir=None):
    """Build a validated :class:`AlignmentTask` from a manifest path or dict.

    Relative paths resolve against the manifest's directory. Absent image rows
    are imputed with a seed derived from the manifest's ``seed``.
    """
    if isinstance(config, (str, Path)):
        base = Path(config).resolve().parent if base_dir is None else Path(base_dir)
        cfg = read_config(config)
    else:
        cfg = dict(config)
        base = Path(base_dir or ".")
    seed = int(cfg.get("seed", 0))

    source = _load_graph(cfg, "source", base)
    target = _load_graph(cfg, "target", base)
    features = {}
    for m in MODALITIES:
        fs = _load_modality(cfg, m, "source", source, base)
        ft = _load_modality(cfg, m, "target", target, base)
        if (fs is None) != (ft is None):
            raise TaskError(f"{m} features given for only one graph")
        if fs is None:
            continue
        if m == "image":
            fs = impute_missing_images(fs, [seed, 0])
            ft = impute_missing_images(ft, [seed, 1])
        features[m] = (fs, ft)

    train = read_pivots(_path(cfg, "train_pivots", base)) if "train_pivots" in cfg else _as_pairs([])
    test = read_pivots(_path(cfg, "test_pivots", base)) if "test_pivots" in cfg else _as_pairs([])
    task = AlignmentTask(source, target, features, train, test)
    for m, (cs, ct) in task.coverage().items():
        log.info("%s coverage: source %.1f%%, target %.1f%%", m, 100 * cs, 100 * ct)
    return task


def save_task(task, directory, extra=None):
    """Write ``task`` to ``directory`` and return the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cfg = {}
    for side, kg in (("source", task.source), ("target", task.target)):
        write_vocab(d / f"{side}_entities.tsv", kg.entity_vocab)
        write_vocab(d / f"{side}_relations.tsv", kg.relation_vocab)
        write_triples(d / f"{side}_triples.tsv", kg.triples)
        cfg[f"{side}_entities"] = f"{side}_entities.tsv"
        cfg[f"{side}_relations"] = f"{side}_relations.tsv"
        cfg[f"{side}_triples"] = f"{side}_triples.tsv"
    for m, (fs, ft) in task.features.items():
        cfg[f"{m}_dim"] = str(fs.matrix.shape[1])
        for side, f in (("source", fs), ("target", ft)):
            name = f"{m}_{side}.mmea"
            write_matrix(d / name, f.matrix, f.present)
            cfg[f"{m}_{side}"] = name
    write_pivots(d / "train_pivots.tsv", task.train_pivots)
    write_pivots(d / "test_pivots.tsv", task.test_pivots)
    cfg["train_pivots"] = "train_pivots.tsv"
    cfg["test_pivots"] = "test_pivots.tsv"
    cfg.update(extra or {})
    path = d / "task.cfg"
    write_config(path, cfg)
    return path
