"""Synthetic alignment tasks with known ground truth.

The target graph is an entity-permuted copy of a power-law source graph with
random edge dropout. Every feature modality is a modality-specific linear
view of one shared per-entity latent vector plus independent Gaussian noise
on each side.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from mmea.kgdata import AlignmentTask, KnowledgeGraph, ModalityFeatures, Vocab, impute_missing_images


@dataclass
class SynthConfig:
    n_entities: int = 200
    n_triples: int = 600
    n_relations: int = 12
    powerlaw_exponent: float = 0.8
    edge_dropout: float = 0.05
    latent_dim: int = 4
    noise: dict = field(default_factory=lambda: {"image": 0.3, "relation": 0.3, "attribute": 0.3})
    dims: dict = field(default_factory=lambda: {"image": 64, "relation": 32, "attribute": 32, "surface": 48})
    image_coverage: float = 1.0
    seed_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_entities < 2:
            raise ValueError("n_entities must be >= 2")
        max_edges = self.n_entities * (self.n_entities - 1) // 2
        if not 0 <= self.n_triples <= max_edges:
            raise ValueError(f"n_triples must lie in [0, {max_edges}]")
        if self.n_relations < 1 or self.latent_dim < 1:
            raise ValueError("n_relations and latent_dim must be >= 1")
        if not 0.0 <= self.edge_dropout <= 1.0:
            raise ValueError("edge_dropout must lie in [0, 1]")
        if not 0.0 < self.image_coverage <= 1.0:
            raise ValueError("image_coverage must lie in (0, 1]")
        if not 0.0 <= self.seed_fraction < 1.0:
            raise ValueError("seed_fraction must lie in [0, 1)")
        if self.powerlaw_exponent < 0:
            raise ValueError("powerlaw_exponent must be >= 0")
        for m, s in self.noise.items():
            if s < 0:
                raise ValueError(f"noise for {m} must be >= 0")
            if m not in self.dims:
                raise ValueError(f"no width configured for {m}")

    @classmethod
    def from_dict(cls, d):
        """Build from flat ``key = value`` strings (``noise_<m>``, ``dim_<m>``)."""
        base = cls()
        kw = {}
        noise, dims = dict(base.noise), dict(base.dims)
        types = {f.name: f.type for f in fields(cls)}
        for key, value in d.items():
            if key.startswith("noise_"):
                m = key[len("noise_"):]
                if str(value).lower() in ("", "none", "off"):
                    noise.pop(m, None)
                else:
                    noise[m] = float(value)
            elif key.startswith("dim_"):
                dims[key[len("dim_"):]] = int(value)
            elif key in types and key not in ("noise", "dims"):
                kw[key] = float(value) if types[key] == "float" else int(value)
        return cls(noise=noise, dims=dims, **kw)


def powerlaw_edges(n, n_edges, exponent, rng):
    """Distinct undirected edges with endpoint probability proportional to rank^-exponent."""
    w = np.arange(1, n + 1, dtype=np.float64) ** (-exponent)
    w = w[rng.permutation(n)]
    w /= w.sum()
    seen = set()
    edges = []
    while len(edges) < n_edges:
        k = 2 * (n_edges - len(edges)) + 16
        hs = rng.choice(n, size=k, p=w)
        ts = rng.choice(n, size=k, p=w)
        for h, t in zip(hs.tolist(), ts.tolist()):
            key = (min(h, t), max(h, t))
            if h == t or key in seen:
                continue
            seen.add(key)
            edges.append((h, t))
            if len(edges) == n_edges:
                break
    return np.array(edges, dtype=np.int64).reshape(-1, 2)


def make_task(cfg=None):
    """Generate an :class:`AlignmentTask` and the ground-truth permutation.

    Returns ``(task, perm)`` with source entity ``i`` matching target ``perm[i]``.
    """
    cfg = cfg or SynthConfig()
    ss = np.random.SeedSequence(cfg.seed)
    g_graph, g_perm, g_feat, g_split, g_mask = (np.random.default_rng(s) for s in ss.spawn(5))
    n = cfg.n_entities

    edges = powerlaw_edges(n, cfg.n_triples, cfg.powerlaw_exponent, g_graph)
    rels = g_graph.integers(0, cfg.n_relations, size=len(edges))
    src_triples = np.column_stack([edges[:, 0], rels, edges[:, 1]])
    perm = g_perm.permutation(n)
    keep = g_graph.random(len(src_triples)) >= cfg.edge_dropout
    tgt_triples = src_triples[keep].copy()
    tgt_triples[:, 0] = perm[tgt_triples[:, 0]]
    tgt_triples[:, 2] = perm[tgt_triples[:, 2]]

    rel_vocab = Vocab(f"r{i}" for i in range(cfg.n_relations))
    source = KnowledgeGraph(Vocab(f"s{i}" for i in range(n)), rel_vocab, src_triples)
    target = KnowledgeGraph(Vocab(f"t{i}" for i in range(n)), Vocab(rel_vocab.labels), tgt_triples)

    inv = np.argsort(perm)
    latent = g_feat.standard_normal((n, cfg.latent_dim))
    features = {}
    for m in ("image", "relation", "attribute", "surface"):
        if m not in cfg.noise:
            continue
        sigma = cfg.noise[m]
        view = g_feat.standard_normal((cfg.latent_dim, cfg.dims[m])) / np.sqrt(cfg.latent_dim)
        clean = latent @ view
        fs = clean + sigma * g_feat.standard_normal(clean.shape)
        ft = (clean + sigma * g_feat.standard_normal(clean.shape))[inv]
        ps = pt = np.ones(n, dtype=bool)
        if m == "image" and cfg.image_coverage < 1.0:
            ps = g_mask.random(n) < cfg.image_coverage
            pt = g_mask.random(n) < cfg.image_coverage
            ps[0] = pt[0] = True  # at least one observed row per side
            fs = impute_missing_images(ModalityFeatures(m, fs, ps), [cfg.seed, 0]).matrix
            ft = impute_missing_images(ModalityFeatures(m, ft, pt), [cfg.seed, 1]).matrix
        features[m] = (ModalityFeatures(m, fs, ps), ModalityFeatures(m, ft, pt))

    order = g_split.permutation(n)
    n_train = int(round(cfg.seed_fraction * n))
    pairs = np.column_stack([order, perm[order]])
    task = AlignmentTask(source, target, features, pairs[:n_train], pairs[n_train:])
    return task, perm
