"""Context-conditioned multiproduct log-demand surface.

A shared encoder maps per-product context tokens to latents; small heads on
those latents produce the coefficients of a structured surface in log-prices
(linear terms, cubic-spline own terms, and attention-weighted cross terms
over a sparse neighbor graph).  Because the surface is an explicit function
of log-prices, own- and cross-price elasticities and own-price curvature are
exact analytic derivatives read off the same forward pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from .autodiff import Tensor, concat, embed, gather_last, gather_rows
from .spline import SplineSpec, eval_basis
from .util import atomic_write_text, seed_lineage, rng_stream

SELF_SCORE_SENTINEL = -1e9
CATEGORY_RANK_BONUS = 1e6
CATEGORICALS = ("store", "upc", "brand", "style", "category")

# Heads whose outputs multiply spline terms; frozen during the warm-start phase.
SPLINE_HEAD_PARAMS = (
    "own_spline_W", "own_spline_b",
    "pair_spline_W", "pair_spline_b",
    "pair_inter_W", "pair_inter_b",
)


class GraphError(ValueError):
    """Neighbor-graph selection is impossible or inconsistent."""


class CheckpointError(ValueError):
    """Checkpoint file is missing fields or internally inconsistent."""


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = (256, 128, 64)
    d_att: int = 32
    embed_dim: int = 8
    n_knots: int = 3
    k_neighbors: int = 4
    dropout: float = 0.2547
    bonus_brand: float = 0.5
    bonus_style: float = 0.5
    size_penalty: float = 1.0
    category_priority: bool = False

    @property
    def d_h(self) -> int:
        return self.hidden[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["hidden"] = tuple(int(x) for x in d["hidden"])
        return ModelConfig(**d)


@dataclass
class Universe:
    """Ordered product axis plus the static metadata the model conditions on."""

    upcs: list
    brand_id: np.ndarray
    style_id: np.ndarray
    category_id: np.ndarray
    log_liters: np.ndarray
    vocabs: dict  # categorical name -> {code: index}, index 0 reserved unknown

    @property
    def n(self) -> int:
        return len(self.upcs)

    def to_dict(self) -> dict:
        return {
            "upcs": list(self.upcs),
            "brand_id": [int(v) for v in self.brand_id],
            "style_id": [int(v) for v in self.style_id],
            "category_id": [int(v) for v in self.category_id],
            "log_liters": [float(v) for v in self.log_liters],
            "vocabs": {k: dict(v) for k, v in self.vocabs.items()},
        }

    @staticmethod
    def from_dict(d: dict) -> "Universe":
        return Universe(
            upcs=list(d["upcs"]),
            brand_id=np.asarray(d["brand_id"], dtype=int),
            style_id=np.asarray(d["style_id"], dtype=int),
            category_id=np.asarray(d["category_id"], dtype=int),
            log_liters=np.asarray(d["log_liters"], dtype=float),
            vocabs={k: dict(v) for k, v in d["vocabs"].items()},
        )


@dataclass(frozen=True)
class SparseGraph:
    """Per-focal-row neighbor list; row i attends to columns edges[i]."""

    edges: np.ndarray  # (n, k_eff) int
    provenance: str = "online"

    @property
    def k_eff(self) -> int:
        return self.edges.shape[1]


@dataclass
class Batch:
    """Wide store-week instances stacked along the leading axis."""

    u: np.ndarray      # (B, n) log prices, imputed where unobserved
    y: np.ndarray      # (B, n) log demand, NaN where unobserved
    mask: np.ndarray   # (B, n) 1.0 observed / 0.0 not
    cat: np.ndarray    # (B, n, 5) categorical ids (store, upc, brand, style, category)
    num: np.ndarray    # (B, n, F) standardized numeric features + miss flags
    stores: list       # len B
    weeks: list        # len B

    @property
    def size(self) -> int:
        return self.u.shape[0]


@dataclass
class ForwardOutput:
    """One forward pass with every cache needed for derivatives and losses."""

    yhat: Tensor        # (B, n)
    e_own: Tensor       # (B, n)
    e_cross: Tensor     # (B, n, k_eff) aligned with graph.edges
    curvature: Tensor   # (B, n)
    attn: Tensor        # (B, n, k_eff)
    scores: Tensor      # (B, n, n), diagonal at the self-score sentinel
    graph: SparseGraph
    basis0: np.ndarray  # (B, n, K) basis values at the batch prices
    basis1: np.ndarray
    basis2: np.ndarray


@dataclass
class ModelState:
    config: ModelConfig
    params: dict            # name -> float64 ndarray
    universe: Universe
    spline_specs: list      # per product, aligned with universe.upcs
    codec: dict             # token codec state (owned by the panel layer)
    seed: int
    frozen_graph: np.ndarray | None = None
    train_weeks: list = dc_field(default_factory=list)
    val_weeks: list = dc_field(default_factory=list)
    extra: dict = dc_field(default_factory=dict)

    def metadata_bonus(self) -> np.ndarray:
        """Additive score prior: brand/style affinity minus size mismatch."""
        cfg, uni = self.config, self.universe
        same_brand = (uni.brand_id[:, None] == uni.brand_id[None, :]).astype(float)
        same_style = (uni.style_id[:, None] == uni.style_id[None, :]).astype(float)
        size_gap = np.abs(uni.log_liters[:, None] - uni.log_liters[None, :])
        return cfg.bonus_brand * same_brand + cfg.bonus_style * same_style - cfg.size_penalty * size_gap

    def same_category(self) -> np.ndarray:
        cid = self.universe.category_id
        m = cid[:, None] == cid[None, :]
        np.fill_diagonal(m, False)
        return m

    def n_layers(self) -> int:
        return len(self.config.hidden)


def trainable_names(state: ModelState, freeze_spline_heads: bool = False) -> tuple:
    names = sorted(state.params)
    if freeze_spline_heads:
        names = [n for n in names if n not in SPLINE_HEAD_PARAMS]
    return tuple(names)


def decay_names(state: ModelState) -> tuple:
    """Weight-decay group: encoder/embedding/attention weight matrices.

    Biases and the output layers that produce price-response coefficients are
    excluded from decay.
    """
    out = [n for n in sorted(state.params)
           if n.startswith(("enc_W", "emb_", "att_"))]
    return tuple(out)


def init_state(config: ModelConfig, universe: Universe, spline_specs: list,
               codec: dict, n_num_features: int, seed: int,
               beta_eda: float = -2.0) -> ModelState:
    """Build a fresh parameter set.

    The own-price raw-slope bias starts at inverse-softplus(-beta_eda) so
    every context opens with an own elasticity of exactly beta_eda; all
    price-response head weights start at zero, which makes the initial
    surface log-linear in prices.
    """
    if len(spline_specs) != universe.n:
        raise ValueError("one spline spec per product required")
    if beta_eda >= 0:
        raise ValueError("beta_eda must be negative")
    rng = rng_stream(seed, "init")
    K = config.n_knots
    d_h = config.d_h
    params: dict = {}
    for name in CATEGORICALS:
        vocab = universe.vocabs[name]
        params[f"emb_{name}"] = rng.normal(0.0, 0.1, size=(len(vocab) + 1, config.embed_dim))
    dims = [5 * config.embed_dim + n_num_features, *config.hidden]
    for layer, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"enc_W{layer}"] = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
        params[f"enc_b{layer}"] = np.zeros(d_out)
    params["att_Wq"] = rng.normal(0.0, 1.0 / np.sqrt(d_h), size=(d_h, config.d_att))
    params["att_Wk"] = rng.normal(0.0, 1.0 / np.sqrt(d_h), size=(d_h, config.d_att))
    params["own_base_W"] = np.zeros((d_h, 2))
    params["own_base_b"] = np.array([0.0, float(np.log(np.expm1(-beta_eda)))])
    params["own_spline_W"] = np.zeros((d_h, K))
    params["own_spline_b"] = np.zeros(K)
    params["pair_lin_W"] = np.zeros((2 * d_h, 1))
    params["pair_lin_b"] = np.zeros(1)
    params["pair_spline_W"] = np.zeros((2 * d_h, K))
    params["pair_spline_b"] = np.zeros(K)
    params["pair_inter_W"] = np.zeros((2 * d_h, K * K))
    params["pair_inter_b"] = np.zeros(K * K)
    return ModelState(config=config, params=params, universe=universe,
                      spline_specs=list(spline_specs), codec=codec, seed=int(seed))


def wrap_params(state: ModelState, trainable=()) -> dict:
    """Wrap parameter arrays as engine tensors; ``trainable`` get gradients."""
    trainable = set(trainable)
    return {name: Tensor(arr, requires_grad=name in trainable)
            for name, arr in state.params.items()}


# -- neighbor graph -------------------------------------------------------------


def select_graph(mean_scores: np.ndarray, k: int, category_priority: bool = False,
                 same_cat: np.ndarray | None = None,
                 provenance: str = "online") -> SparseGraph:
    """Pick the top-k neighbor columns per focal row from averaged scores.

    With ``category_priority`` set, same-category candidates get a large
    additive rank bonus, so they fill slots first and any shortfall is
    backfilled by original-score order.  The bonus affects ranking only.
    """
    s = np.asarray(mean_scores, dtype=float)
    n = s.shape[0]
    if n < 2:
        raise GraphError("need at least 2 products to build a neighbor graph")
    if s.shape != (n, n):
        raise GraphError(f"score matrix must be square, got {s.shape}")
    if k < 1:
        raise GraphError(f"k must be >= 1, got {k}")
    k_eff = min(k, n - 1)
    rank = s.copy()
    np.fill_diagonal(rank, -np.inf)  # self never a candidate
    if category_priority:
        if same_cat is None:
            raise GraphError("category_priority requires a same-category matrix")
        rank = rank + CATEGORY_RANK_BONUS * same_cat.astype(float)
    order = np.argsort(-rank, axis=1, kind="stable")  # ties -> lowest index
    return SparseGraph(edges=order[:, :k_eff].astype(np.intp), provenance=provenance)


def score_pairs(state: ModelState, H: np.ndarray) -> np.ndarray:
    """Attention scores for one instance's latents (n, d_h) -> (n, n).

    Scaled dot product of query/key projections plus the metadata bonus; the
    diagonal is pinned to a large negative sentinel so a product never scores
    itself.
    """
    P = state.params
    q = H @ P["att_Wq"]
    kk = H @ P["att_Wk"]
    S = q @ kk.T / np.sqrt(state.config.d_att) + state.metadata_bonus()
    np.fill_diagonal(S, SELF_SCORE_SENTINEL)
    return S


# -- forward --------------------------------------------------------------------


def _encode(pt: dict, batch: Batch, state: ModelState, mode: str, rng) -> Tensor:
    """Tokens -> latents, flattened to (B*n, d_h)."""
    cfg = state.config
    B, n, _ = batch.cat.shape
    pieces = [embed(pt[f"emb_{name}"], batch.cat[:, :, c]) for c, name in enumerate(CATEGORICALS)]
    pieces.append(Tensor(batch.num))
    x = concat(pieces, axis=-1).reshape(B * n, -1)
    for layer in range(state.n_layers()):
        x = (x @ pt[f"enc_W{layer}"]) + pt[f"enc_b{layer}"]
        x = x.tanh()
        if mode == "train" and cfg.dropout > 0.0:
            if rng is None:
                raise ValueError("train-mode forward with dropout needs an rng")
            keep = (rng.random(x.shape) >= cfg.dropout).astype(float) / (1.0 - cfg.dropout)
            x = x * keep
    return x


def forward(state: ModelState, batch: Batch, pt: dict | None = None, *,
            mode: str = "eval", graph: SparseGraph | None = None,
            rng=None) -> ForwardOutput:
    """Evaluate the surface, its elasticities and curvature for a batch.

    ``graph=None`` selects neighbors online from this batch's mean scores;
    passing a graph (e.g. the frozen one) pins the sparsity pattern.  Price
    differentiation treats latents, scores and attention as constants, which
    holds exactly here because prices never enter the tokens.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode}")
    cfg = state.config
    n = state.universe.n
    B = batch.size
    if B == 0:
        raise ValueError("empty batch")
    if pt is None:
        pt = wrap_params(state)
    K = cfg.n_knots
    d_h = cfg.d_h

    x = _encode(pt, batch, state, mode, rng)          # (B*n, d_h)
    H = x.reshape(B, n, d_h)

    q = (x @ pt["att_Wq"]).reshape(B, n, cfg.d_att)
    kk = (x @ pt["att_Wk"]).reshape(B, n, cfg.d_att)
    S = (q @ kk.swapaxes(1, 2)) * (1.0 / np.sqrt(cfg.d_att)) + state.metadata_bonus()
    off_diag = 1.0 - np.eye(n)
    S = S * off_diag + SELF_SCORE_SENTINEL * np.eye(n)

    if graph is None:
        graph = select_graph(S.data.mean(axis=0), cfg.k_neighbors,
                             cfg.category_priority, state.same_category())
    edges = graph.edges
    k_eff = graph.k_eff

    attn = gather_last(S, edges).softmax()            # (B, n, k_eff)

    own_base = x @ pt["own_base_W"] + pt["own_base_b"]
    bias_i = own_base[:, 0].reshape(B, n)
    beta_own = -(own_base[:, 1].softplus().reshape(B, n))
    w_own = (x @ pt["own_spline_W"] + pt["own_spline_b"]).reshape(B, n, K)

    Hi = H.reshape(B, n, 1, d_h).broadcast_to((B, n, k_eff, d_h))
    Hj = gather_rows(H, edges)
    pin = concat([Hi, Hj], axis=-1).reshape(B * n * k_eff, 2 * d_h)
    beta_pair = (pin @ pt["pair_lin_W"] + pt["pair_lin_b"]).reshape(B, n, k_eff)
    w_pair = (pin @ pt["pair_spline_W"] + pt["pair_spline_b"]).reshape(B, n, k_eff, K)
    U = (pin @ pt["pair_inter_W"] + pt["pair_inter_b"]).reshape(B, n, k_eff, K, K)

    # spline caches are plain numbers: constants under parameter gradients
    B0 = np.stack([eval_basis(spec, batch.u[:, i], 0) for i, spec in enumerate(state.spline_specs)], axis=1)
    B1 = np.stack([eval_basis(spec, batch.u[:, i], 1) for i, spec in enumerate(state.spline_specs)], axis=1)
    B2 = np.stack([eval_basis(spec, batch.u[:, i], 2) for i, spec in enumerate(state.spline_specs)], axis=1)
    B0j = B0[:, edges, :]                              # (B, n, k_eff, K)
    B1j = B1[:, edges, :]
    u_sel = batch.u[:, edges]                          # (B, n, k_eff)

    Bi0 = B0[:, :, None, :, None]                      # focal basis, expanded over edges
    Bi1 = B1[:, :, None, :, None]
    Bi2 = B2[:, :, None, :, None]
    Bj0 = B0j[:, :, :, None, :]
    Bj1 = B1j[:, :, :, None, :]

    own_term = bias_i + beta_own * batch.u + (w_own * B0).sum(-1)
    inter00 = (U * (Bi0 * Bj0)).sum((-2, -1))          # B_i^T U B_j per edge
    edge_term = attn * (beta_pair * u_sel + (w_pair * B0j).sum(-1) + inter00)
    yhat = own_term + edge_term.sum(-1)

    inter10 = (U * (Bi1 * Bj0)).sum((-2, -1))
    inter01 = (U * (Bi0 * Bj1)).sum((-2, -1))
    inter20 = (U * (Bi2 * Bj0)).sum((-2, -1))
    e_own = beta_own + (w_own * B1).sum(-1) + (attn * inter10).sum(-1)
    e_cross = attn * (beta_pair + (w_pair * B1j).sum(-1) + inter01)
    curv = (w_own * B2).sum(-1) + (attn * inter20).sum(-1)

    return ForwardOutput(yhat=yhat, e_own=e_own, e_cross=e_cross, curvature=curv,
                         attn=attn, scores=S, graph=graph,
                         basis0=B0, basis1=B1, basis2=B2)


def elasticity_own(out: ForwardOutput, b: int, i: int) -> float:
    """Own-price elasticity of product ``i`` in batch row ``b``."""
    return float(out.e_own.data[b, i])


def elasticity_cross(out: ForwardOutput, b: int, i: int, j: int) -> float | None:
    """Cross elasticity of i w.r.t. j's price, or None if the edge is absent."""
    if i == j:
        raise ValueError("use elasticity_own for the diagonal")
    slots = np.nonzero(out.graph.edges[i] == j)[0]
    if slots.size == 0:
        return None
    return float(out.e_cross.data[b, i, slots[0]])


def curvature(out: ForwardOutput, b: int, i: int) -> float:
    return float(out.curvature.data[b, i])


def dense_elasticity(out: ForwardOutput, b: int) -> np.ndarray:
    """Full (n, n) Jacobian matrix with non-selected pairs at exactly zero."""
    n = out.e_own.data.shape[1]
    E = np.zeros((n, n))
    E[np.arange(n), np.arange(n)] = out.e_own.data[b]
    for i in range(n):
        E[i, out.graph.edges[i]] = out.e_cross.data[b, i]
    return E


def elasticity_field(state: ModelState, batch: Batch, b: int = 0,
                     graph: SparseGraph | None = None):
    """Bind one instance's context into a callable u -> (n, n) Jacobian."""
    if graph is None:
        out0 = forward(state, batch, mode="eval")
        graph = out0.graph

    def field(u):
        u = np.asarray(u, dtype=float)
        probe = Batch(u=np.repeat(u[None, :], batch.size, axis=0), y=batch.y,
                      mask=batch.mask, cat=batch.cat, num=batch.num,
                      stores=batch.stores, weeks=batch.weeks)
        return dense_elasticity(forward(state, probe, mode="eval", graph=graph), b)

    return field


def freeze_graph(state: ModelState, instances) -> SparseGraph:
    """Average evaluation-mode scores over instances and pin the top-k graph.

    Instances are accumulated in (store, week) order so the result does not
    depend on how the caller batched or shuffled them.
    """
    from .training import collate  # late import; no cycle at module load

    if len(instances) == 0:
        raise GraphError("cannot freeze a graph from zero instances")
    insts = sorted(instances, key=lambda w: (w.store, w.week_id))
    total = np.zeros((state.universe.n, state.universe.n))
    count = 0
    for start in range(0, len(insts), 512):
        chunk = collate(insts[start:start + 512])
        out = forward(state, chunk, mode="eval")
        total += out.scores.data.sum(axis=0)
        count += chunk.size
    graph = select_graph(total / count, state.config.k_neighbors,
                         state.config.category_priority, state.same_category(),
                         provenance="frozen")
    state.frozen_graph = graph.edges
    return graph


# -- checkpoint serialization ----------------------------------------------------

CHECKPOINT_FORMAT = "demandfield-checkpoint-v1"


def save_checkpoint(state: ModelState, path: str) -> None:
    """Serialize every float64 parameter plus the surrounding contracts."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": state.config.to_dict(),
        "params": {name: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
                   for name, arr in sorted(state.params.items())},
        "universe": state.universe.to_dict(),
        "spline_specs": [spec.to_dict() for spec in state.spline_specs],
        "codec": state.codec,
        "frozen_graph": None if state.frozen_graph is None else [[int(v) for v in row] for row in state.frozen_graph],
        "train_weeks": [int(w) for w in state.train_weeks],
        "val_weeks": [int(w) for w in state.val_weeks],
        "seed": int(state.seed),
        "seed_lineage": seed_lineage(state.seed),
        "extra": state.extra,
    }
    atomic_write_text(path, json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path: str) -> ModelState:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unrecognized checkpoint format: {doc.get('format')!r}")
    for key in ("config", "params", "universe", "spline_specs", "codec", "seed"):
        if key not in doc:
            raise CheckpointError(f"checkpoint missing field {key!r}")
    config = ModelConfig.from_dict(doc["config"])
    universe = Universe.from_dict(doc["universe"])
    specs = [SplineSpec.from_dict(d) for d in doc["spline_specs"]]
    if len(specs) != universe.n:
        raise CheckpointError("spline spec count does not match universe size")
    params = {}
    for name, entry in doc["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[name] = arr
    state = ModelState(config=config, params=params, universe=universe,
                       spline_specs=specs, codec=doc["codec"], seed=int(doc["seed"]),
                       train_weeks=list(doc.get("train_weeks", [])),
                       val_weeks=list(doc.get("val_weeks", [])),
                       extra=doc.get("extra", {}))
    fg = doc.get("frozen_graph")
    if fg is not None:
        edges = np.asarray(fg, dtype=np.intp)
        if edges.shape[0] != universe.n or edges.shape[1] > max(universe.n - 1, 0):
            raise CheckpointError("frozen graph shape inconsistent with universe")
        state.frozen_graph = edges
    _check_shapes(state)
    return state


def _check_shapes(state: ModelState) -> None:
    cfg = state.config
    K, d_h = cfg.n_knots, cfg.d_h
    expected = {
        "att_Wq": (d_h, cfg.d_att), "att_Wk": (d_h, cfg.d_att),
        "own_base_W": (d_h, 2), "own_base_b": (2,),
        "own_spline_W": (d_h, K), "own_spline_b": (K,),
        "pair_lin_W": (2 * d_h, 1), "pair_lin_b": (1,),
        "pair_spline_W": (2 * d_h, K), "pair_spline_b": (K,),
        "pair_inter_W": (2 * d_h, K * K), "pair_inter_b": (K * K,),
    }
    for name, shape in expected.items():
        if name not in state.params:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        if state.params[name].shape != shape:
            raise CheckpointError(f"parameter {name!r} has shape {state.params[name].shape}, expected {shape}")
    for name in CATEGORICALS:
        key = f"emb_{name}"
        if key not in state.params:
            raise CheckpointError(f"checkpoint missing parameter {key!r}")
        rows = len(state.universe.vocabs[name]) + 1
        if state.params[key].shape != (rows, cfg.embed_dim):
            raise CheckpointError(f"embedding {key!r} inconsistent with vocab")
