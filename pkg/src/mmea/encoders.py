"""Per-modality encoders and weighted-concatenation fusion.

The structural channel is a two-layer GCN over the block-diagonal union of
both graphs, fed by a trainable entity table. Feature channels (image,
relation, attribute, surface) are single affine maps. Every forward function
has a matching ``*_backward`` that accumulates into ``Param.grad``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from mmea.numcore import DTYPE, Param, as_matrix, row_l2_normalize

STRUCTURE = "structure"
MODALITY_ORDER = (STRUCTURE, "image", "relation", "attribute", "surface")

DEFAULT_DIMS = {
    "gcn": (400, 400, 200),
    "image": 200,
    "relation": 100,
    "attribute": 100,
    "surface": 100,
}


SPARSE_THRESHOLD = 4000


def normalize_adjacency(source, target=None, sparse=None):
    """Symmetrically normalized adjacency with self-loops over both graphs.

    Target node ``j`` sits at row ``n_source + j``; no cross-graph edges.
    Relation types and edge multiplicity are ignored. Large graphs (or
    ``sparse=True``) get a CSR matrix instead of a dense array.
    """
    graphs = [source] if target is None else [source, target]
    n = sum(g.n_entities for g in graphs)
    parts, offset = [], 0
    for g in graphs:
        parts.append(g.edges() + offset)
        offset += g.n_entities
    e = np.concatenate(parts) if parts else np.zeros((0, 2), dtype=np.int64)
    loops = np.arange(n)
    r = np.concatenate([e[:, 0], e[:, 1], loops])
    c = np.concatenate([e[:, 1], e[:, 0], loops])
    m = sp.coo_matrix((np.ones(len(r)), (r, c)), shape=(n, n)).tocsr()
    m.data[:] = 1.0  # duplicates collapse to a single unit edge
    d = 1.0 / np.sqrt(np.asarray(m.sum(axis=1)).ravel())
    a = sp.diags(d) @ m @ sp.diags(d)
    if sparse is None:
        sparse = n > SPARSE_THRESHOLD
    return a.tocsr() if sparse else a.toarray()


@dataclass
class ModelParams:
    entity_table: Param
    gcn_weights: list
    proj: dict  # modality -> (weight Param, bias Param)
    modality_logits: Param
    modalities: list = field(default_factory=list)
    relu_last: bool = False

    def all_params(self):
        out = []
        if self.entity_table is not None:
            out.append(self.entity_table)
            out.extend(self.gcn_weights)
        for m in self.modalities:
            if m in self.proj:
                out.extend(self.proj[m])
        out.append(self.modality_logits)
        return out

    def structural_params(self):
        if self.entity_table is None:
            return []
        return [self.entity_table, *self.gcn_weights]

    def zero_grad(self):
        for p in self.all_params():
            p.zero_grad()

    def weights(self):
        return softmax(self.modality_logits.value.reshape(-1))


def init_params(n_entities, feature_dims, rng, gcn_dims=DEFAULT_DIMS["gcn"],
                out_dims=None, use_structure=True, relu_last=False):
    """Randomly initialize a model.

    ``feature_dims`` maps each feature modality to its input width. Each
    modality draws from its own child generator so dropping a modality never
    changes the others' initial values.
    """
    out_dims = {**{k: v for k, v in DEFAULT_DIMS.items() if k != "gcn"}, **(out_dims or {})}
    streams = dict(zip(MODALITY_ORDER, np.random.default_rng(rng).spawn(len(MODALITY_ORDER))))
    modalities = ([STRUCTURE] if use_structure else []) + \
        [m for m in MODALITY_ORDER[1:] if m in feature_dims]
    if not modalities:
        raise ValueError("model needs at least one modality")

    entity_table, gcn_weights = None, []
    if use_structure:
        g = streams[STRUCTURE]
        d0 = gcn_dims[0]
        entity_table = Param(g.normal(0.0, 1.0 / np.sqrt(d0), (n_entities, d0)), name="entity_table")
        for layer, (a, b) in enumerate(zip(gcn_dims[:-1], gcn_dims[1:])):
            gcn_weights.append(Param(_glorot(g, a, b), name=f"gcn_w{layer}"))
    proj = {}
    for m in modalities[1 if use_structure else 0:]:
        g = streams[m]
        d_in, d_out = feature_dims[m], out_dims[m]
        proj[m] = (Param(_glorot(g, d_in, d_out), name=f"{m}_w"),
                   Param(np.zeros((1, d_out)), name=f"{m}_b"))
    logits = Param(np.zeros((1, len(modalities))), name="modality_logits")
    return ModelParams(entity_table, gcn_weights, proj, logits, modalities, relu_last)


def _glorot(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), (fan_in, fan_out))


# ------------------------------------------------------------------- GCN

def gcn_forward(params, adjacency, cache=None):
    """Stacked ``relu(A @ H @ W)`` layers; returns the last layer's output."""
    if isinstance(params, ModelParams):
        h, weights, relu_last = params.entity_table.value, params.gcn_weights, params.relu_last
    else:
        h, weights = params[0], params[1]
        relu_last = params[2] if len(params) > 2 else False
    a = adjacency if sp.issparse(adjacency) else as_matrix(adjacency)
    if a.shape[0] != a.shape[1] or a.shape[1] != h.shape[0]:
        raise ValueError(f"adjacency {a.shape} does not match {h.shape[0]} nodes")
    layers = []
    for k, w in enumerate(weights):
        w = w.value if isinstance(w, Param) else w
        if h.shape[1] != w.shape[0]:
            raise ValueError(f"layer width mismatch: {h.shape} x {w.shape}")
        agg = a @ h
        z = agg @ w
        layers.append((agg, z))
        h = np.maximum(z, 0.0) if relu_last or k < len(weights) - 1 else z
    if cache is not None:
        cache["gcn"] = layers
    return h


def gcn_backward(params, adjacency, cache, d_out):
    layers = cache["gcn"]
    dh = d_out
    last = len(layers) - 1
    for k, w, (agg, z) in zip(range(last, -1, -1), reversed(params.gcn_weights), reversed(layers)):
        dz = dh * (z > 0) if params.relu_last or k < last else dh
        w.grad += agg.T @ dz
        dh = adjacency.T @ (dz @ w.value.T)
    params.entity_table.grad += dh


# ------------------------------------------------------------ projections

def project_modality(features, weight, bias):
    """Affine map ``X @ W + b`` applied to every entity row."""
    x = as_matrix(features)
    w = weight.value if isinstance(weight, Param) else as_matrix(weight)
    b = bias.value if isinstance(bias, Param) else as_matrix(bias)
    if x.shape[1] != w.shape[0] or b.shape[-1] != w.shape[1]:
        raise ValueError(f"shape mismatch: x {x.shape}, W {w.shape}, b {b.shape}")
    return x @ w + b


def project_backward(features, weight, bias, d_out):
    weight.grad += features.T @ d_out
    bias.grad += d_out.sum(axis=0, keepdims=True)


# ------------------------------------------------------------------ fusion

def softmax(x):
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(x - x.max())
    return e / e.sum()


def fuse(embeddings, modality_logits):
    """Concatenate row-normalized blocks scaled by softmax of the logits.

    Returns ``(fused, weights)``.
    """
    if len(embeddings) == 0:
        raise ValueError("fuse needs at least one modality")
    logits = modality_logits.value if isinstance(modality_logits, Param) else modality_logits
    logits = np.asarray(logits, dtype=DTYPE).reshape(-1)
    if logits.shape[0] != len(embeddings):
        raise ValueError("one logit per modality required")
    rows = {e.shape[0] for e in embeddings}
    if len(rows) != 1:
        raise ValueError("all modality embeddings need the same row count")
    w = softmax(logits)
    blocks = [wi * row_l2_normalize(e) for wi, e in zip(w, embeddings)]
    return np.concatenate(blocks, axis=1), w


def softmax_backward(p, dp):
    return p * (dp - np.dot(p, dp))


# ------------------------------------------------------------ full encoder

@dataclass
class EmbeddingSet:
    per_modality: dict
    fused: np.ndarray
    weights: np.ndarray
    normalized: dict = field(default_factory=dict)


class Encoder:
    """Binds model parameters to a task's fixed inputs (adjacency, features).

    Feature inputs are stacked source-then-target, matching the adjacency
    node order.
    """

    def __init__(self, params, adjacency, inputs, n_source):
        self.params = params
        self.n_source = n_source
        self.adjacency = adjacency
        self.inputs = inputs  # modality -> stacked (N, d_in) matrix
        self.cache = {}

    @classmethod
    def for_task(cls, params, task, adjacency=None):
        if adjacency is None and STRUCTURE in params.modalities:
            adjacency = normalize_adjacency(task.source, task.target)
        inputs = {}
        for m in params.modalities:
            if m == STRUCTURE:
                continue
            fs, ft = task.features[m]
            inputs[m] = row_l2_normalize(np.vstack([fs.matrix, ft.matrix]))
        return cls(params, adjacency, inputs, task.source.n_entities)

    def forward(self):
        out = {}
        self.cache = {}
        for m in self.params.modalities:
            if m == STRUCTURE:
                out[m] = gcn_forward(self.params, self.adjacency, self.cache)
            else:
                w, b = self.params.proj[m]
                out[m] = project_modality(self.inputs[m], w, b)
        return out

    def backward(self, d_embeddings):
        for m, d in d_embeddings.items():
            if m == STRUCTURE:
                gcn_backward(self.params, self.adjacency, self.cache, d)
            else:
                w, b = self.params.proj[m]
                project_backward(self.inputs[m], w, b, d)

    def embed(self):
        emb = self.forward()
        order = self.params.modalities
        fused, w = fuse([emb[m] for m in order], self.params.modality_logits)
        return EmbeddingSet(emb, fused, w, {m: row_l2_normalize(emb[m]) for m in order})
