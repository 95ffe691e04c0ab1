"""Training orchestration: total objective = beta * alignment + pair loss.

One step: encode every view once, run the inner critic ascent on the
detached embeddings, assemble each anchor's pools (with the view-filter
transfer once the start epoch is reached), then take a single Adam step
on the encoders against the averaged anchor losses plus the frozen-critic
alignment term, and finally refresh the memory bank with this step's
embeddings.

Determinism comes from hierarchical seeding: every consumer draws from
default_rng([seed, epoch, stream]) so a resumed run replays the exact
random stream of an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import align as al
from . import diffmath as dm
from . import encoders as enc
from . import membank as mb
from . import pools as pl
from . import uniloss as ul
from .dataio import MultiViewDataset, read_container, write_container
from .errors import ConfigError, DivergenceError
from .optim import AdamState, adaptive_moment_update

VARIANTS = ("fp", "fp+da", "sap+da")

_STREAM_SHUFFLE = 0
_STREAM_NEGATIVES = 1
_STREAM_CRITIC = 2


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 250
    lr: float = 3e-3
    seed: int = 0
    beta: float = 1.0
    variant: str = "sap+da"
    widths: tuple[int, ...] = (48,)
    embed_dim: int = 32
    loss: ul.LossConfig = field(default_factory=ul.LossConfig)
    align: al.AlignConfig = field(default_factory=al.AlignConfig)
    pool: pl.PoolConfig = field(default_factory=pl.PoolConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0, batch_size >= 1, lr > 0")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")

    def resolved(self) -> "TrainConfig":
        """Apply the ablation-variant forcing rules."""
        cfg = self
        if cfg.variant == "fp":
            cfg = dataclasses.replace(
                cfg,
                align=dataclasses.replace(cfg.align, discrepancy="none"),
                pool=dataclasses.replace(cfg.pool, k_top=0),
            )
        elif cfg.variant == "fp+da":
            cfg = dataclasses.replace(
                cfg, pool=dataclasses.replace(cfg.pool, k_top=0)
            )
        return cfg

    @property
    def encoder_widths(self) -> tuple[int, ...]:
        return tuple(self.widths) + (self.embed_dim,)


@dataclass
class TrainState:
    params: enc.EncoderParams
    critics: dict[tuple[int, int], al.CriticParams]
    critic_opts: dict[tuple[int, int], AdamState]
    bank: mb.MemoryBank
    tracker: pl.SimilarityTracker
    enc_opt: AdamState
    epoch: int
    seed: int


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    transfer_events: list[tuple] = field(default_factory=list)


def _spawn_seeds(seed: int, count: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(child.generate_state(1)[0]) for child in ss.spawn(count)]


def init_state(config: TrainConfig, dataset: MultiViewDataset) -> TrainState:
    cfg = config.resolved()
    if dataset.m < 2 and cfg.align.discrepancy != "none":
        raise ConfigError("alignment requires at least two views")
    enc_seed, bank_seed, critic_seed = _spawn_seeds(cfg.seed, 3)
    params = enc.init_params(
        list(cfg.encoder_widths), dataset.m, enc_seed, list(dataset.dims)
    )
    n_train = int(dataset.train_mask.sum())
    if n_train < 2:
        raise ConfigError("need at least two training samples")
    bank = mb.bank_init(n_train, dataset.m, cfg.embed_dim, bank_seed)
    critics: dict[tuple[int, int], al.CriticParams] = {}
    critic_opts: dict[tuple[int, int], AdamState] = {}
    if cfg.align.discrepancy == "wasserstein":
        for idx, (i, j) in enumerate(_view_pairs(dataset.m)):
            critics[(i, j)] = al.init_critic(
                cfg.embed_dim, critic_seed + idx, cfg.align.critic_hidden
            )
            critic_opts[(i, j)] = AdamState()
    tracker = pl.SimilarityTracker(cfg.pool.eta)
    return TrainState(
        params, critics, critic_opts, bank, tracker, AdamState(), 0, cfg.seed
    )


def _view_pairs(m: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(m) for j in range(i + 1, m)]


def _batched_unisap_node(
    view_nodes: list[dm.Node],
    pools_list: list[pl.ContrastPools],
    loss_cfg: ul.LossConfig,
) -> dm.Node:
    """Mean anchor pair-loss for a whole batch in one small graph.

    Within a step every anchor's pools share one slot layout (m batch
    views, then bank and transferred constants) and one negative count,
    so the batch's similarity sets assemble from a few broadcasted
    products.  Only the batch-view slots need gradient paths; bank,
    transferred and negative features are constants.  Matches the
    per-anchor pair_similarities / pair_loss_node composition exactly.
    """
    m = len(view_nodes)
    nb = view_nodes[0].value.shape[0]
    n_pos = pools_list[0].n_pos
    n_neg = pools_list[0].n_neg
    if any(p.n_pos != n_pos or p.n_neg != n_neg for p in pools_list):
        raise ConfigError("anchors disagree on pool sizes within a step")

    # slot s of every anchor as one (B, D) block; s < m is differentiable
    slots: list[dm.Node] = list(view_nodes)
    for s in range(m, n_pos):
        slots.append(dm.constant(np.stack([p.pos_feats[s] for p in pools_list])))
    neg3 = dm.constant(np.stack([p.neg_feats for p in pools_list]))  # (B, K, D)

    def rowwise(a: dm.Node, b: dm.Node) -> dm.Node:
        return dm.reshape(dm.reduce_sum(dm.mul(a, b), axis=1), (nb, 1))

    dim = view_nodes[0].value.shape[1]
    pos_cols = []
    for a in range(n_pos):
        for b in range(a + 1, n_pos):
            if a >= m and b >= m:  # constant-constant pair, no gradient path
                vals = np.einsum("bd,bd->b", slots[a].value, slots[b].value)
                pos_cols.append(dm.constant(vals[:, None]))
            else:
                pos_cols.append(rowwise(slots[a], slots[b]))
    s_pos = dm.concat(pos_cols, axis=1)  # (B, C(n_pos, 2))

    neg_blocks = []
    for a in range(n_pos):
        if a >= m:
            vals = np.einsum("bd,bkd->bk", slots[a].value, neg3.value)
            neg_blocks.append(dm.constant(vals))
        else:
            prod = dm.mul(dm.reshape(slots[a], (nb, 1, dim)), neg3)
            neg_blocks.append(dm.reduce_sum(prod, axis=2))
    s_neg = dm.concat(neg_blocks, axis=1)  # (B, n_pos * K)

    return _batched_pair_loss(s_pos, s_neg, loss_cfg)


def _batched_pair_loss(s_pos: dm.Node, s_neg: dm.Node, cfg: ul.LossConfig) -> dm.Node:
    """Row-wise pair loss over (B, *) similarity matrices, averaged over rows."""
    nb = s_pos.value.shape[0]
    if cfg.mode == "hinge":
        cols_p, cols_n = s_pos.value.shape[1], s_neg.value.shape[1]
        i = np.argmin(s_pos.value, axis=1) + np.arange(nb) * cols_p
        j = np.argmax(s_neg.value, axis=1) + np.arange(nb) * cols_n
        worst = (
            dm.gather_rows(dm.reshape(s_neg, (nb * cols_n,)), j)
            - dm.gather_rows(dm.reshape(s_pos, (nb * cols_p,)), i)
            + cfg.margin
        )
        return dm.mul(dm.constant(cfg.scale), dm.reduce_mean(dm.relu(worst)))
    logit_p, logit_n = ul._logit_nodes(s_pos, s_neg, cfg)
    core = dm.softplus(dm.logsumexp(logit_p, axis=1) + dm.logsumexp(logit_n, axis=1))
    return dm.mul(dm.constant(cfg.scale / cfg.gamma), dm.reduce_mean(core))


def train_step(
    state: TrainState,
    batch_positions: np.ndarray,
    batch_views: list[np.ndarray],
    epoch: int,
    config: TrainConfig,
    neg_rng: np.random.Generator,
    critic_rng: np.random.Generator,
) -> dict:
    """One optimizer step over a batch; mutates state in place."""
    cfg = config
    m = state.bank.m
    if len(batch_positions) == 0:
        raise ConfigError("empty batch")

    # (1) encode all views once; the same nodes serve loss and metrics
    param_values = state.params.param_dict()
    leaves = {name: dm.Node(arr, op=name) for name, arr in param_values.items()}
    view_nodes = []
    for v in range(m):
        layers = [
            (leaves[f"enc/v{v}/l{l}/W"], leaves[f"enc/v{v}/l{l}/b"])
            for l in range(len(state.params.stacks[v]))
        ]
        view_nodes.append(enc.forward_node(dm.constant(batch_views[v]), layers))
    emb_values = [n.value for n in view_nodes]

    # (2) inner critic ascent on detached embeddings
    wd_pairs: dict[tuple[int, int], float] = {}
    gp_pairs: dict[tuple[int, int], float] = {}
    dg_pairs: dict[tuple[int, int], float] = {}
    if cfg.align.discrepancy == "wasserstein":
        for pair in _view_pairs(m):
            i, j = pair
            state.critics[pair], est, state.critic_opts[pair] = al.train_critic(
                state.critics[pair],
                emb_values[i],
                emb_values[j],
                cfg.align,
                critic_rng,
                state.critic_opts[pair],
            )
            wd_pairs[pair] = est
            gp_pairs[pair] = al.gradient_penalty(
                state.critics[pair], emb_values[i], emb_values[j], critic_rng
            )
            dg_pairs[pair] = al.disc_grad_diagnostic(
                state.critics[pair], emb_values[i], emb_values[j]
            )

    # (3) pools per anchor, with tracker recording and optional transfer
    pools_list = []
    events: list[tuple] = []
    sap_active = cfg.pool.k_top > 0
    for b, anchor in enumerate(batch_positions):
        pools_ = pl.build_pools(
            [emb_values[v][b] for v in range(m)],
            state.bank,
            int(anchor),
            cfg.pool,
            neg_rng,
        )
        if sap_active:
            scores = pl.record_pool_similarities(pools_, state.tracker, epoch)
            if epoch >= cfg.pool.sap_start_epoch:
                pools_, moved = pl.view_filter_transfer(
                    pools_, state.tracker, cfg.pool.k_top, epoch, cfg.pool,
                    scores=scores,
                )
                events.extend(moved)
        pools_list.append(pools_)

    # (4) total objective with critics frozen
    unisap = _batched_unisap_node(view_nodes, pools_list, cfg.loss)
    if cfg.align.discrepancy == "none":
        da_node = dm.constant(0.0)
    else:
        da_node, wd_now = al.alignment_loss(view_nodes, state.critics, cfg.align)
        if cfg.align.discrepancy == "kl":
            wd_pairs = wd_now
    total = unisap + dm.mul(dm.constant(cfg.beta), da_node)
    if not np.isfinite(total.value):
        raise DivergenceError(
            f"non-finite loss at epoch {epoch}: unisap={unisap.value!r} "
            f"da={da_node.value!r}"
        )

    # (5) one adaptive-moment step on the encoders
    names = list(param_values)
    grads = dm.backward(total, [leaves[n] for n in names])
    new_values, state.enc_opt = adaptive_moment_update(
        param_values, dict(zip(names, grads)), state.enc_opt, cfg.lr
    )
    state.params = state.params.replace_params(new_values)

    # (6) refresh the bank with this step's embeddings
    for b, anchor in enumerate(batch_positions):
        for v in range(m):
            mb.bank_update(state.bank, int(anchor), v, emb_values[v][b])

    metrics = {
        "loss_total": float(total.value),
        "loss_unisap": float(unisap.value),
        "loss_da": float(da_node.value),
        "transfers": len(events),
    }
    for pair, est in wd_pairs.items():
        metrics[f"wd_pair_{pair[0]}_{pair[1]}"] = est
    for pair, gp in gp_pairs.items():
        metrics[f"gp_pair_{pair[0]}_{pair[1]}"] = gp
    for pair, dg in dg_pairs.items():
        metrics[f"dg_pair_{pair[0]}_{pair[1]}"] = dg
    return metrics, events


def fit(
    config: TrainConfig,
    dataset: MultiViewDataset,
    state: TrainState | None = None,
) -> tuple[TrainState, History]:
    """Train for config.epochs (resuming from `state` if given)."""
    cfg = config.resolved()
    if state is None:
        state = init_state(cfg, dataset)
    else:
        if state.bank.m != dataset.m or state.params.in_dims != dataset.dims:
            raise ConfigError("checkpoint does not match the dataset's views")
    train_idx = dataset.train_indices
    train_views = [v[train_idx] for v in dataset.views]
    n_train = len(train_idx)
    if state.bank.n != n_train:
        raise ConfigError("checkpoint bank size does not match the training split")

    history = History()
    pair_keys = [
        f"{kind}_pair_{i}_{j}"
        for kind in ("wd", "gp", "dg")
        for i, j in _view_pairs(dataset.m)
    ]
    for epoch in range(state.epoch, cfg.epochs):
        shuffle_rng = np.random.default_rng([cfg.seed, epoch, _STREAM_SHUFFLE])
        neg_rng = np.random.default_rng([cfg.seed, epoch, _STREAM_NEGATIVES])
        critic_rng = np.random.default_rng([cfg.seed, epoch, _STREAM_CRITIC])
        order = shuffle_rng.permutation(n_train)
        step_rows = []
        for start in range(0, n_train, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            views = [tv[batch] for tv in train_views]
            try:
                metrics, events = train_step(
                    state, batch, views, epoch, cfg, neg_rng, critic_rng
                )
            except DivergenceError as exc:
                # leave the caller a resumable state for checkpointing
                exc.state = state
                exc.history = history
                raise
            step_rows.append(metrics)
            history.transfer_events.extend(events)
        row = {"epoch": epoch}
        for key in ("loss_total", "loss_unisap", "loss_da"):
            row[key] = float(np.mean([r[key] for r in step_rows]))
        row["transfers"] = int(sum(r["transfers"] for r in step_rows))
        for key in pair_keys:
            vals = [r[key] for r in step_rows if key in r]
            row[key] = float(np.mean(vals)) if vals else 0.0
        history.rows.append(row)
        state.epoch = epoch + 1
    return state, history


# ---------------------------------------------------------------------------
# frozen-parameter evaluation helpers


def encode_dataset(
    params: enc.EncoderParams, dataset: MultiViewDataset, indices: np.ndarray
) -> list[np.ndarray]:
    """Per-view embeddings of the selected samples under frozen parameters."""
    return [
        enc.encode(dataset.views[v][indices], params, v) for v in range(dataset.m)
    ]


def concat_features(per_view: list[np.ndarray], views: list[int] | None = None) -> np.ndarray:
    """Concatenate per-view embeddings (optionally a view subset) per sample."""
    chosen = per_view if views is None else [per_view[v] for v in views]
    return np.concatenate(chosen, axis=1)


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(state: TrainState, path) -> None:
    sections: dict[str, object] = {}
    meta = {
        "epoch": state.epoch,
        "seed": state.seed,
        "m": state.params.m,
        "in_dims": list(state.params.in_dims),
        "widths": list(state.params.widths),
        "eta": state.tracker.eta,
        "enc_opt_t": state.enc_opt.t,
        "pairs": sorted(state.critics),
        "critic_opt_t": {f"{i}_{j}": state.critic_opts[(i, j)].t for i, j in state.critics},
        "critic_layers": {
            f"{i}_{j}": len(state.critics[(i, j)].layers) for i, j in state.critics
        },
    }
    sections["meta"] = json.dumps(meta, sort_keys=True).encode("utf-8")
    for name, arr in state.params.param_dict().items():
        sections[name] = arr
    for name, arr in state.enc_opt.m.items():
        sections[f"opt/enc/m/{name}"] = arr
    for name, arr in state.enc_opt.v.items():
        sections[f"opt/enc/v/{name}"] = arr
    sections["bank"] = state.bank.store
    for (i, j), critic in state.critics.items():
        prefix = f"critic/{i}_{j}"
        for name, arr in critic.param_dict(prefix).items():
            sections[name] = arr
        opt = state.critic_opts[(i, j)]
        for name, arr in opt.m.items():
            sections[f"opt/{prefix}/m/{name.split('/', 1)[1]}"] = arr
        for name, arr in opt.v.items():
            sections[f"opt/{prefix}/v/{name.split('/', 1)[1]}"] = arr
    anchors = sorted(state.tracker._slots)
    if anchors:
        slot_epochs, slot_lens, ids_parts, value_parts = [], [], [], []
        slot_counts = []
        for anchor in anchors:
            slots = state.tracker._slots[anchor]
            slot_counts.append(len(slots))
            for epoch_i, ids, values in slots:
                slot_epochs.append(epoch_i)
                slot_lens.append(len(ids))
                ids_parts.append(ids)
                value_parts.append(values)
        sections["tracker/anchors"] = np.asarray(anchors, dtype=np.int64)
        sections["tracker/slot_counts"] = np.asarray(slot_counts, dtype=np.int64)
        sections["tracker/slot_epochs"] = np.asarray(slot_epochs, dtype=np.int64)
        sections["tracker/slot_lens"] = np.asarray(slot_lens, dtype=np.int64)
        sections["tracker/ids"] = np.concatenate(ids_parts)
        sections["tracker/values"] = np.concatenate(value_parts)
    write_container(path, sections)


def load_checkpoint(path) -> TrainState:
    sections = read_container(path)
    meta = json.loads(sections["meta"].decode("utf-8"))
    m, in_dims, widths = meta["m"], meta["in_dims"], meta["widths"]
    stacks = []
    for v in range(m):
        stack = []
        for l in range(len(widths)):
            stack.append((sections[f"enc/v{v}/l{l}/W"], sections[f"enc/v{v}/l{l}/b"]))
        stacks.append(stack)
    params = enc.EncoderParams(m, tuple(in_dims), tuple(widths), stacks)
    enc_opt = AdamState(
        {n: sections[f"opt/enc/m/{n}"] for n in params.param_dict()},
        {n: sections[f"opt/enc/v/{n}"] for n in params.param_dict()},
        meta["enc_opt_t"],
    ) if meta["enc_opt_t"] else AdamState()
    bank = mb.MemoryBank(sections["bank"])
    critics: dict[tuple[int, int], al.CriticParams] = {}
    critic_opts: dict[tuple[int, int], AdamState] = {}
    for i, j in [tuple(p) for p in meta["pairs"]]:
        prefix = f"critic/{i}_{j}"
        n_layers = meta["critic_layers"][f"{i}_{j}"]
        layers = [
            (sections[f"{prefix}/l{k}/W"], sections[f"{prefix}/l{k}/b"])
            for k in range(n_layers)
        ]
        critics[(i, j)] = al.CriticParams(layers)
        t = meta["critic_opt_t"][f"{i}_{j}"]
        if t:
            names = list(critics[(i, j)].param_dict().keys())
            critic_opts[(i, j)] = AdamState(
                {n: sections[f"opt/{prefix}/m/{n.split('/', 1)[1]}"] for n in names},
                {n: sections[f"opt/{prefix}/v/{n.split('/', 1)[1]}"] for n in names},
                t,
            )
        else:
            critic_opts[(i, j)] = AdamState()
    tracker = pl.SimilarityTracker(meta["eta"])
    if "tracker/anchors" in sections:
        anchors = sections["tracker/anchors"]
        slot_counts = sections["tracker/slot_counts"]
        slot_epochs = sections["tracker/slot_epochs"]
        slot_lens = sections["tracker/slot_lens"]
        ids = sections["tracker/ids"]
        values = sections["tracker/values"]
        slot_i, offset = 0, 0
        for anchor, count in zip(anchors.tolist(), slot_counts.tolist()):
            slots = deque()
            for _ in range(count):
                length = int(slot_lens[slot_i])
                slots.append(
                    (
                        int(slot_epochs[slot_i]),
                        ids[offset : offset + length].copy(),
                        values[offset : offset + length].copy(),
                    )
                )
                offset += length
                slot_i += 1
            tracker._slots[anchor] = slots
            tracker._last_epoch[anchor] = slots[-1][0]
    return TrainState(
        params, critics, critic_opts, bank, tracker, enc_opt, meta["epoch"], meta["seed"]
    )
