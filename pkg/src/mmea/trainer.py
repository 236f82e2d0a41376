"""Optimization loop: AdamW over pivot batches, iterative learning with
probation, semi-supervised and visual-pivot (unsupervised) entry points."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from mmea import kgdata
from mmea.alignloss import LossConfig, cosine_matrix, model_loss
from mmea.encoders import DEFAULT_DIMS, STRUCTURE, Encoder, ModelParams, init_params
from mmea.inference import csls_adjust, evaluate
from mmea.numcore import NonFiniteError, Param
from mmea.seeding import ILConfig, PivotLedger, induce_visual_pivots, propose_round, threshold_pivots

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    structure_lr: float | None = None  # entity table + GCN weights; defaults to learning_rate
    weight_decay: float = 1e-2
    batch_size: int = 7500
    base_epochs: int = 500
    il_epochs: int = 500
    rng_seed: int = 0
    il: ILConfig = field(default_factory=ILConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    unsupervised: bool = False
    visual_pivot_count: int | None = None
    visual_pivot_threshold: float | None = None
    gcn_dims: tuple = DEFAULT_DIMS["gcn"]
    out_dims: dict = field(default_factory=dict)
    disabled: tuple = ()
    proposal_csls: bool = False
    relu_last: bool = False  # identity output layer; see README
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p.value) for p in params],
                   [np.zeros_like(p.value) for p in params])


def adamw_step(params, grads, moments, lr=5e-4, weight_decay=1e-2,
               betas=(0.9, 0.999), eps=1e-8):
    """One in-place AdamW update (decoupled decay, bias-corrected moments).

    ``lr`` is a scalar or one rate per parameter.
    """
    b1, b2 = betas
    moments.step += 1
    t = moments.step
    rates = np.broadcast_to(np.asarray(lr, dtype=np.float64), (len(params),))
    for k, (p, g) in enumerate(zip(params, grads)):
        lr = rates[k]
        value = p.value if isinstance(p, Param) else p
        if g.shape != value.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {value.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient")
        value *= 1.0 - lr * weight_decay
        moments.m[k] = b1 * moments.m[k] + (1 - b1) * g
        moments.v[k] = b2 * moments.v[k] + (1 - b2) * g * g
        m_hat = moments.m[k] / (1 - b1 ** t)
        v_hat = moments.v[k] / (1 - b2 ** t)
        value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, moments


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    pivot_count: int
    weights: tuple


@dataclass
class TrainState:
    params: ModelParams
    moments: AdamState
    epoch: int
    ledger: PivotLedger
    history: list = field(default_factory=list)
    encoder: Encoder | None = None
    induced: list = field(default_factory=list)

    def history_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "pivot_count"] + [f"w_{m}" for m in self.params.modalities])
        for r in self.history:
            w.writerow([r.epoch, repr(r.loss), r.pivot_count] + [repr(x) for x in r.weights])
        return buf.getvalue()


def _streams(seed):
    init, shuffle = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init), np.random.default_rng(shuffle)


def build_model(task, cfg, init_rng):
    disabled = set(cfg.disabled)
    feature_dims = {m: fs.matrix.shape[1] for m, (fs, _) in task.features.items() if m not in disabled}
    n = task.source.n_entities + task.target.n_entities
    return init_params(n, feature_dims, init_rng, gcn_dims=cfg.gcn_dims,
                       out_dims=cfg.out_dims, use_structure=STRUCTURE not in disabled,
                       relu_last=cfg.relu_last)


def visual_pivots(task, cfg):
    """Induce seed pairs from image similarity among entities with real images."""
    if "image" not in task.features:
        raise kgdata.TaskError("unsupervised mode needs image features")
    fs, ft = task.features["image"]
    rows, cols = np.flatnonzero(fs.present), np.flatnonzero(ft.present)
    S = cosine_matrix(fs.matrix[rows], ft.matrix[cols])
    n = cfg.visual_pivot_count
    if n is None:
        n = min(S.shape)
    pivots = induce_visual_pivots(S, n)
    if cfg.visual_pivot_threshold is not None:
        pivots = threshold_pivots(pivots, cfg.visual_pivot_threshold)
    return [(int(rows[i]), int(cols[j]), s) for i, j, s in pivots]


def fused_similarity(state_or_encoder):
    """Cosine similarity of fused source vs target embeddings."""
    enc = state_or_encoder.encoder if isinstance(state_or_encoder, TrainState) else state_or_encoder
    emb = enc.embed()
    return cosine_matrix(emb.fused[:enc.n_source], emb.fused[enc.n_source:])


def _propose(state, task, cfg):
    led = state.ledger
    S = fused_similarity(state.encoder)
    src = np.array(sorted(set(range(task.source.n_entities)) - led.aligned_sources()), dtype=np.int64)
    tgt = np.array(sorted(set(range(task.target.n_entities)) - led.aligned_targets()), dtype=np.int64)
    if len(src) == 0 or len(tgt) == 0:
        led.round_counter += 1
        return
    sub = S[np.ix_(src, tgt)]
    if cfg.proposal_csls and min(sub.shape) >= 3:
        sub = csls_adjust(sub, 3)
    propose_round(sub, led, cfg.il, src, tgt)


def train(task, cfg, callback=None):
    """Train on ``task``; returns the final :class:`TrainState`.

    Deterministic for a given ``cfg.rng_seed``.
    """
    init_rng, shuffle_rng = _streams(cfg.rng_seed)
    params = build_model(task, cfg, init_rng)
    encoder = Encoder.for_task(params, task)
    ns = task.source.n_entities

    induced = []
    if cfg.unsupervised:
        induced = visual_pivots(task, cfg)
        ledger = PivotLedger.from_pairs([(s, t) for s, t, _ in induced])
        log.info("induced %d visual pivots", len(induced))
    else:
        if len(task.train_pivots) == 0:
            raise kgdata.TaskError("semi-supervised training needs train pivots")
        ledger = PivotLedger.from_pairs(task.train_pivots)

    all_params = params.all_params()
    structural = {id(p) for p in params.structural_params()}
    slr = cfg.learning_rate if cfg.structure_lr is None else cfg.structure_lr
    lrs = [slr if id(p) in structural else cfg.learning_rate for p in all_params]
    state = TrainState(params, AdamState.zeros_like(all_params), 0, ledger,
                       encoder=encoder, induced=induced)
    total_epochs = cfg.base_epochs + cfg.il_epochs
    for epoch in range(total_epochs):
        pivots = ledger.permanent_array()
        if len(pivots) == 0:
            raise kgdata.TaskError("no training pivots")
        order = shuffle_rng.permutation(len(pivots))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = pivots[order[start:start + cfg.batch_size]]
            params.zero_grad()
            loss, _ = model_loss(encoder, batch, cfg.loss, ns)
            adamw_step(all_params, [p.grad for p in all_params], state.moments,
                       lrs, cfg.weight_decay, cfg.adam_betas, cfg.adam_eps)
            epoch_loss += loss * len(batch)
        state.epoch = epoch + 1
        il_epoch = epoch + 1 - cfg.base_epochs
        if il_epoch > 0 and il_epoch % cfg.il.K_e == 0:
            _propose(state, task, cfg)
        record = EpochRecord(epoch, epoch_loss / len(pivots), len(pivots),
                             tuple(float(x) for x in params.weights()))
        state.history.append(record)
        if callback is not None:
            callback(state, record)
    return state


def evaluate_state(state, task, use_csls=True, k=3, candidates="test", gold=None):
    S = fused_similarity(state.encoder)
    gold = task.test_pivots if gold is None else gold
    return evaluate(S, gold, use_csls=use_csls, k=k, candidates=candidates)


def ablate(task, cfg, disabled_modalities, use_csls=True, k=3):
    """Train and evaluate with the given modalities removed from the model."""
    disabled = set(cfg.disabled) | set(disabled_modalities)
    active = ([STRUCTURE] if STRUCTURE not in disabled else []) + \
        [m for m in task.modalities if m not in disabled]
    if not active:
        raise ValueError("all modalities disabled")
    run_cfg = replace(cfg, disabled=tuple(sorted(disabled)))
    state = train(task, run_cfg)
    report = evaluate_state(state, task, use_csls=use_csls, k=k)
    return report, state


# ------------------------------------------------------------ checkpoints

def save_checkpoint(state, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    params = state.params.all_params()
    manifest = {}
    for p in params:
        kgdata.write_matrix(d / f"{p.name}.mmea", np.atleast_2d(p.value))
        manifest[p.name] = f"{p.name}.mmea"
    kgdata.write_config(d / "params.cfg", manifest)
    moments = {}
    for p, m, v in zip(params, state.moments.m, state.moments.v):
        kgdata.write_matrix(d / f"{p.name}.adam_m.mmea", np.atleast_2d(m))
        kgdata.write_matrix(d / f"{p.name}.adam_v.mmea", np.atleast_2d(v))
        moments[f"adam_m.{p.name}"] = f"{p.name}.adam_m.mmea"
        moments[f"adam_v.{p.name}"] = f"{p.name}.adam_v.mmea"
    (d / "ledger.tsv").write_text(state.ledger.dump(), encoding="utf-8")
    kgdata.write_config(d / "state.cfg", {
        "epoch": state.epoch,
        "adam_step": state.moments.step,
        "modalities": ",".join(state.params.modalities),
        "params": "params.cfg",
        "ledger": "ledger.tsv",
        **moments,
    })


def load_checkpoint(directory, task, cfg):
    """Rebuild a :class:`TrainState` (float32 precision) bound to ``task``."""
    d = Path(directory)
    st = kgdata.read_config(d / "state.cfg")
    mods = st["modalities"].split(",")
    disabled = tuple(m for m in ("structure", *task.modalities) if m not in mods)
    run_cfg = replace(cfg, disabled=disabled)
    params = build_model(task, run_cfg, np.random.default_rng(0))
    if params.modalities != mods:
        raise kgdata.TaskError("checkpoint modalities do not match the task")
    manifest = kgdata.read_config(d / st["params"])
    plist = params.all_params()
    for p in plist:
        value, _ = kgdata.read_matrix(d / manifest[p.name])
        if value.shape != p.value.shape:
            raise kgdata.TaskError(f"checkpoint shape mismatch for {p.name}")
        p.value = value
    moments = AdamState(
        [kgdata.read_matrix(d / st[f"adam_m.{p.name}"])[0] for p in plist],
        [kgdata.read_matrix(d / st[f"adam_v.{p.name}"])[0] for p in plist],
        int(st["adam_step"]))
    ledger = PivotLedger.load((d / st["ledger"]).read_text(encoding="utf-8"))
    enc = Encoder.for_task(params, task)
    return TrainState(params, moments, int(st["epoch"]), ledger, encoder=enc)
