"""Toy-scale DenseBEV: BEV grid cells as object queries with in-network NMS.

Pipeline for one frame::

    observation --encoder--> grid G (temporal self-attention over the aligned
    previous grid) --stage-0 head--> one box per cell --NMS + top-k--> queries
    (detached from G) [+ aligned memory queries] --decoder layers, each with
    its own head and suppression block--> detections

Parameters live in a flat ``name -> Tensor`` dict so checkpoints are trivial.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .geometry import Pose2D
from .structures import (CX, CY, LOG_H, LOG_L, LOG_W, ORIGIN_GRID, ORIGIN_MEMORY, BevGrid,
                         GridSpec, QuerySet, param_dim, params_to_array5, params_to_boxes)
from .suppression import (AttentionMask, Detection, Prefilter, build_attention_mask,
                          confidence_order, merge_mask, nms_arrays, nms_on_active)
from .temporal import MOTION_DIM, MemoryQueue, align_bev_grid, align_memory, relative_pose
from .tensor import Tensor

PRIOR_PROB = 0.01
LOG_DIM_RANGE = (math.log(0.05), math.log(30.0))


@dataclass
class DenseBEVConfig:
    grid_n: int = 32
    grid_m: int = 32
    extent_x: float = 16.0
    extent_y: float = 16.0
    obs_channels: int = 4
    patch_radius: int = 2
    pos_dim: int = 8
    hidden: int = 64
    dim: int = 32
    num_classes: int = 2
    num_layers: int = 3
    n_queries: int = 64
    tau: tuple = (0.1,)
    heads: int = 2
    lambdas: tuple = ()
    anchor_w: float = 1.0
    anchor_l: float = 1.0
    anchor_h: float = 1.5
    z_min: float = -3.0
    z_max: float = 3.0
    use_velocity: bool = True
    query_init: str = "dense"
    temporal_grid: bool = True
    rotation_center: str = "grid_center"
    use_memory: bool = False
    memory_loss: bool = True
    memory_mask: bool = True
    memory_frames: int = 2
    memory_budget: int = 16
    enc_sigma: float = 1.5
    cross_sigma: float = 1.5
    score_threshold: float = 0.3
    prefilter: str = "none"
    nms_heuristics: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.tau, (int, float)):
            self.tau = (float(self.tau),)
        self.tau = tuple(float(t) for t in self.tau)
        if len(self.tau) == 1:
            self.tau = self.tau * (self.num_layers + 1)
        if len(self.tau) != self.num_layers + 1:
            raise ValueError(f"tau needs 1 or {self.num_layers + 1} entries, got {len(self.tau)}")
        if not self.lambdas:
            self.lambdas = (1.0,) * (self.num_layers + 1)
        self.lambdas = tuple(float(x) for x in self.lambdas)
        if len(self.lambdas) != self.num_layers + 1:
            raise ValueError(
                f"lambdas must have num_layers + 1 = {self.num_layers + 1} entries, got {len(self.lambdas)}")
        if self.query_init not in ("dense", "random"):
            raise ValueError(f"query_init must be 'dense' or 'random', got {self.query_init!r}")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.num_layers < 1:
            raise ValueError("need at least one decoder layer")

    @property
    def grid_spec(self) -> GridSpec:
        return GridSpec(self.grid_n, self.grid_m, self.extent_x, self.extent_y)

    @property
    def param_dim(self) -> int:
        return param_dim(self.use_velocity)

    @property
    def center_height(self) -> float:
        return 0.5 * (self.z_min + self.z_max)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tau"] = list(self.tau)
        d["lambdas"] = list(self.lambdas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenseBEVConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("tau", "lambdas"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class HeadOutput:
    """Decoded output of one auxiliary head over ``n`` queries."""

    logits: Tensor
    pred: Tensor        # box parameters used by this head's loss
    refined: Tensor     # same values, gradient only into this head's regression
    scores: np.ndarray
    confidence: np.ndarray
    boxes: np.ndarray   # [cx, cy, w, l, yaw] rows

    def detections(self, indices=None) -> list:
        idx = range(len(self.confidence)) if indices is None else indices
        boxes = params_to_boxes(self.pred.data[list(idx)]) if len(idx) else []
        return [Detection(b, tuple(self.scores[i]), source_index=int(i)) for b, i in zip(boxes, idx)]


@dataclass
class FrameState:
    """What one frame hands to the next in streaming mode."""

    grid: BevGrid | None = None
    ego_pose: Pose2D | None = None
    timestamp: float | None = None
    memory: MemoryQueue | None = None


@dataclass
class ForwardResult:
    grid: BevGrid
    heads: list
    eligible: list
    masks: list
    queries: list
    final: np.ndarray
    state: FrameState
    first_stage_keep: np.ndarray = None
    extras: dict = field(default_factory=dict)

    @property
    def final_head(self) -> HeadOutput:
        return self.heads[-1]

    def detections(self, score_threshold: float = 0.0) -> list:
        out = self.final_head
        idx = [int(i) for i in self.final if out.confidence[i] >= score_threshold]
        idx.sort(key=lambda i: (-out.confidence[i], i))
        return out.detections(idx)


def _init(rng, fan_in, fan_out, scale=1.0):
    return Tensor(rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out)), requires_grad=True)


def _zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape):
    return Tensor(np.ones(shape), requires_grad=True)


def positional_code(spec: GridSpec, dim: int) -> np.ndarray:
    """Fixed sinusoidal code of each cell's normalised position."""
    centers = spec.centers()
    xn = centers[:, 0] / spec.extent_x
    yn = centers[:, 1] / spec.extent_y
    cols = []
    for f in range(dim // 4):
        w = math.pi * (2 ** f)
        cols += [np.sin(w * xn), np.cos(w * xn), np.sin(w * yn), np.cos(w * yn)]
    return np.column_stack(cols) if cols else np.zeros((spec.num_cells, 0))


def observation_patches(obs: np.ndarray, radius: int) -> np.ndarray:
    """Per-cell flattened ``(2r+1)^2`` neighbourhoods, zero padded."""
    n, m, c = obs.shape
    if radius == 0:
        return obs.reshape(n * m, c)
    padded = np.pad(obs, ((radius, radius), (radius, radius), (0, 0)))
    k = 2 * radius + 1
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    return win.reshape(n * m, c * k * k)


def locality_bias(a_xy: np.ndarray, b_xy: np.ndarray, sigma: float) -> np.ndarray:
    d2 = ((a_xy[:, None, :] - b_xy[None, :, :]) ** 2).sum(-1)
    return -d2 / (2.0 * sigma * sigma)


class DenseBEV:
    def __init__(self, config: DenseBEVConfig, params: dict | None = None):
        self.config = config
        self.spec = config.grid_spec
        self.params = params if params is not None else self.init_params(config)
        self._pos = positional_code(self.spec, config.pos_dim)
        self._centers = self.spec.centers()
        self._enc_bias = {}
        self._random_ref = None

    # -- parameters -------------------------------------------------------

    @staticmethod
    def init_params(cfg: DenseBEVConfig) -> dict:
        rng = np.random.default_rng(cfg.seed)
        C, H, K, P = cfg.dim, cfg.hidden, cfg.num_classes, cfg.param_dim
        k = 2 * cfg.patch_radius + 1
        in_dim = cfg.obs_channels * k * k + cfg.pos_dim
        p = {
            "enc.w1": _init(rng, in_dim, H), "enc.b1": _zeros(H),
            "enc.w2": _init(rng, H, C), "enc.b2": _zeros(C),
        }
        for name in ("wq", "wk", "wv"):
            p[f"enc.tsa.{name}"] = _init(rng, C, C)
        p["enc.tsa.wo"] = _init(rng, C, C, 0.1)
        p["enc.tsa.bo"] = _zeros(C)
        prior = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
        for i in range(cfg.num_layers + 1):
            p[f"head{i}.cls.w1"] = _init(rng, C, C)
            p[f"head{i}.cls.b1"] = _zeros(C)
            p[f"head{i}.cls.w2"] = _init(rng, C, K, 0.1)
            p[f"head{i}.cls.b2"] = Tensor(np.full(K, prior), requires_grad=True)
            p[f"head{i}.reg.w1"] = _init(rng, C, C)
            p[f"head{i}.reg.b1"] = _zeros(C)
            p[f"head{i}.reg.w2"] = _zeros(C, P)
            p[f"head{i}.reg.b2"] = _zeros(P)
        for l in range(1, cfg.num_layers + 1):
            for att in ("sa", "ca"):
                for name in ("wq", "wk", "wv", "wo"):
                    p[f"dec{l}.{att}.{name}"] = _init(rng, C, C)
                p[f"dec{l}.{att}.bo"] = _zeros(C)
            p[f"dec{l}.ffn.w1"] = _init(rng, C, 2 * C)
            p[f"dec{l}.ffn.b1"] = _zeros(2 * C)
            p[f"dec{l}.ffn.w2"] = _init(rng, 2 * C, C)
            p[f"dec{l}.ffn.b2"] = _zeros(C)
            for ln in ("ln1", "ln2", "ln3"):
                p[f"dec{l}.{ln}.g"] = _ones(C)
                p[f"dec{l}.{ln}.b"] = _zeros(C)
        p["motion.w1"] = _init(rng, MOTION_DIM, C)
        p["motion.b1"] = _zeros(C)
        p["motion.w2"] = _zeros(C, C)
        p["motion.b2"] = _zeros(C)
        if cfg.query_init == "random":
            p["query.embed"] = Tensor(rng.normal(0.0, 1.0, size=(cfg.n_queries, C)), requires_grad=True)
        return p

    def parameters(self) -> dict:
        return self.params

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # -- encoder ----------------------------------------------------------

    def _encoder_bias(self, with_prev: bool) -> np.ndarray | None:
        sigma = self.config.enc_sigma
        if not sigma:
            return None
        if with_prev not in self._enc_bias:
            b = locality_bias(self._centers, self._centers, sigma)
            self._enc_bias[with_prev] = np.concatenate([b, b], axis=1) if with_prev else b
        return self._enc_bias[with_prev]

    def encode_scene(self, observation: np.ndarray, prev_grid: BevGrid | None = None) -> BevGrid:
        cfg, p = self.config, self.params
        obs = np.asarray(observation, dtype=float)
        if obs.shape != (cfg.grid_n, cfg.grid_m, cfg.obs_channels):
            raise ValueError(
                f"observation shape {obs.shape} != ({cfg.grid_n}, {cfg.grid_m}, {cfg.obs_channels})")
        x = Tensor(np.concatenate([observation_patches(obs, cfg.patch_radius), self._pos], axis=1))
        h = T.relu(T.linear(x, p["enc.w1"], p["enc.b1"]))
        g0 = T.linear(h, p["enc.w2"], p["enc.b2"])
        if prev_grid is not None:
            if prev_grid.spec != self.spec:
                raise ValueError("previous grid has a different layout")
            kv = T.concat([g0, T.detach(prev_grid.features)], axis=0)
        else:
            kv = g0
        att = T.masked_attention(g0 @ p["enc.tsa.wq"], kv @ p["enc.tsa.wk"], kv @ p["enc.tsa.wv"],
                                 heads=cfg.heads, bias=self._encoder_bias(prev_grid is not None))
        g = g0 + T.linear(att, p["enc.tsa.wo"], p["enc.tsa.bo"])
        return BevGrid(self.spec, g)

    # -- heads ------------------------------------------------------------

    def anchors(self) -> np.ndarray:
        """Reference parameters of every grid cell: cell centre, centre height, yaw 0."""
        cfg = self.config
        n = self.spec.num_cells
        a = np.zeros((n, cfg.param_dim))
        a[:, CX:CY + 1] = self._centers
        a[:, 2] = cfg.center_height
        a[:, LOG_W] = math.log(cfg.anchor_w)
        a[:, LOG_L] = math.log(cfg.anchor_l)
        a[:, LOG_H] = math.log(cfg.anchor_h)
        a[:, 7] = 1.0
        return a

    def auxiliary_head(self, index: int, features: Tensor, reference: np.ndarray,
                       reference_live: Tensor | None = None) -> HeadOutput:
        p = self.params
        pre = f"head{index}"
        logits = T.linear(T.relu(T.linear(features, p[f"{pre}.cls.w1"], p[f"{pre}.cls.b1"])),
                          p[f"{pre}.cls.w2"], p[f"{pre}.cls.b2"])
        reg = T.linear(T.relu(T.linear(features, p[f"{pre}.reg.w1"], p[f"{pre}.reg.b1"])),
                       p[f"{pre}.reg.w2"], p[f"{pre}.reg.b2"])
        ref = Tensor(reference)
        pred = (reference_live if reference_live is not None else ref) + reg
        refined = ref + reg
        scores = T._sigmoid(logits.data)
        conf = scores.max(axis=1) if scores.shape[1] else np.zeros(len(scores))
        return HeadOutput(logits, pred, refined, scores, conf, params_to_array5(pred.data))

    def clamp_reference(self, params: np.ndarray) -> np.ndarray:
        cfg = self.config
        out = params.copy()
        out[:, CX] = np.clip(out[:, CX], -cfg.extent_x, cfg.extent_x)
        out[:, CY] = np.clip(out[:, CY], -cfg.extent_y, cfg.extent_y)
        out[:, 2] = np.clip(out[:, 2], cfg.z_min, cfg.z_max)
        out[:, LOG_W:LOG_H + 1] = np.clip(out[:, LOG_W:LOG_H + 1], *LOG_DIM_RANGE)
        return out

    # -- first stage ------------------------------------------------------

    def first_stage(self, grid: BevGrid, train: bool = True):
        """Decode every cell, suppress duplicates, keep the top ``n_queries``.

        Returns ``(queries, mask, head_output, keep)`` where ``keep`` are the
        NMS survivors among all cells. The stage-0 head sees the live grid;
        the queries handed to the decoder are detached from it.
        """
        cfg = self.config
        if cfg.query_init == "random":
            return self._random_queries()
        anchors = self.anchors()
        out = self.auxiliary_head(0, grid.features, anchors)
        cells = np.arange(self.spec.num_cells)
        if not train and cfg.prefilter != "none":
            cells = Prefilter.parse(cfg.prefilter).select(out.confidence)
        keep = cells[nms_arrays(out.boxes[cells], out.confidence[cells], cfg.tau[0],
                                source_index=cells, heuristics=cfg.nms_heuristics)]
        n_sel = min(cfg.n_queries, self.spec.num_cells)
        kept_mask = np.zeros(self.spec.num_cells, dtype=bool)
        kept_mask[keep] = True
        ranked = confidence_order(out.confidence)
        survivors = ranked[kept_mask[ranked]]
        fill = ranked[~kept_mask[ranked]]
        sel = np.concatenate([survivors, fill])[:n_sel]
        queries = QuerySet(
            features=T.take_rows(T.detach(grid.features), sel),
            reference=self.clamp_reference(T.detach(out.pred).data[sel]),
            origin=np.full(len(sel), ORIGIN_GRID, dtype=np.int64),
            confidence=out.confidence[sel].copy(),
            anchor_index=sel.astype(np.int64),
            class_scores=out.scores[sel].copy(),
        )
        mask = build_attention_mask(np.flatnonzero(kept_mask[sel]), len(sel))
        return queries, mask, out, keep

    def _random_queries(self):
        cfg = self.config
        if self._random_ref is None:
            rng = np.random.default_rng(cfg.seed + 7919)
            ref = np.zeros((cfg.n_queries, cfg.param_dim))
            ref[:, CX] = rng.uniform(-cfg.extent_x, cfg.extent_x, cfg.n_queries)
            ref[:, CY] = rng.uniform(-cfg.extent_y, cfg.extent_y, cfg.n_queries)
            ref[:, 2] = cfg.center_height
            ref[:, LOG_W] = math.log(cfg.anchor_w)
            ref[:, LOG_L] = math.log(cfg.anchor_l)
            ref[:, LOG_H] = math.log(cfg.anchor_h)
            ref[:, 7] = 1.0
            self._random_ref = ref
        n = cfg.n_queries
        queries = QuerySet(
            features=self.params["query.embed"],
            reference=self._random_ref.copy(),
            origin=np.full(n, ORIGIN_GRID, dtype=np.int64),
            confidence=np.zeros(n),
        )
        return queries, AttentionMask.empty(n), None, np.arange(n)

    # -- decoder ----------------------------------------------------------

    def decoder_layer(self, queries: QuerySet, mask: AttentionMask, grid_features: Tensor,
                      layer_index: int, memory_kv: Tensor | None = None,
                      participants: np.ndarray | None = None):
        """Self-attention, cross-attention to the grid, FFN, head, suppression."""
        cfg, p = self.config, self.params
        pre = f"dec{layer_index}"
        if mask.n_q != queries.n_q:
            raise ValueError(f"mask is {mask.n_q}x{mask.n_q} but there are {queries.n_q} queries")
        x = queries.features
        suppressed = mask.suppressed

        kv, sa_mask = x, mask.bits
        if memory_kv is not None and memory_kv.shape[0]:
            kv = T.concat([x, memory_kv], axis=0)
            extra = np.repeat(suppressed[:, None], memory_kv.shape[0], axis=1)
            sa_mask = np.concatenate([mask.bits, extra], axis=1)
        sa = T.masked_attention(x @ p[f"{pre}.sa.wq"], kv @ p[f"{pre}.sa.wk"], kv @ p[f"{pre}.sa.wv"],
                                sa_mask, heads=cfg.heads)
        x = T.layernorm(x + T.linear(sa, p[f"{pre}.sa.wo"], p[f"{pre}.sa.bo"]),
                        p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])

        n_cells = grid_features.shape[0]
        row_mask = np.repeat(suppressed[:, None], n_cells, axis=1)
        bias = locality_bias(queries.reference[:, CX:CY + 1], self._centers, cfg.cross_sigma) \
            if cfg.cross_sigma else None
        ca = T.masked_attention(x @ p[f"{pre}.ca.wq"], grid_features @ p[f"{pre}.ca.wk"],
                                grid_features @ p[f"{pre}.ca.wv"], row_mask, heads=cfg.heads, bias=bias)
        x = T.layernorm(x + T.linear(ca, p[f"{pre}.ca.wo"], p[f"{pre}.ca.bo"]),
                        p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])

        ffn = T.linear(T.relu(T.linear(x, p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.b1"])),
                       p[f"{pre}.ffn.w2"], p[f"{pre}.ffn.b2"])
        x = T.layernorm(x + ffn, p[f"{pre}.ln3.g"], p[f"{pre}.ln3.b"])

        out = self.auxiliary_head(layer_index, x, queries.reference, queries.reference_live)
        new_mask = nms_on_active(out.boxes, out.confidence, mask, cfg.tau[layer_index],
                                 participants=participants, heuristics=cfg.nms_heuristics)
        new_queries = QuerySet(
            features=x,
            reference=self.clamp_reference(T.detach(out.pred).data),
            origin=queries.origin,
            confidence=out.confidence,
            anchor_index=queries.anchor_index,
            reference_live=out.refined,
            class_scores=out.scores,
        )
        return new_queries, new_mask, out

    # -- full frame -------------------------------------------------------

    def forward(self, observation: np.ndarray, ego_pose: Pose2D | None = None,
                timestamp: float = 0.0, state: FrameState | None = None,
                train: bool = True) -> ForwardResult:
        cfg = self.config
        ego_pose = ego_pose or Pose2D()
        state = state or FrameState()

        prev = None
        if cfg.temporal_grid and state.grid is not None:
            delta = relative_pose(ego_pose, state.ego_pose)
            prev = align_bev_grid(state.grid, delta, self._rotation_center())
        grid = self.encode_scene(observation, prev)

        queries, mask, out0, keep0 = self.first_stage(grid, train=train)
        heads, eligible, masks, query_log = [], [], [], []
        if out0 is not None:
            heads.append(out0)
            eligible.append(np.arange(self.spec.num_cells))
            masks.append(AttentionMask.empty(0))
            query_log.append(None)
        else:
            heads.append(None)
            eligible.append(np.zeros(0, dtype=np.int64))
            masks.append(AttentionMask.empty(0))
            query_log.append(None)

        memory_kv = None
        participants = None
        memory = state.memory
        if cfg.use_memory and memory is not None and len(memory):
            mem_q = align_memory(memory, ego_pose, timestamp, self.params, latest_only=True,
                                 use_velocity=cfg.use_velocity)
            if mem_q is not None:
                n_grid = queries.n_q
                queries = assemble_hybrid_queries(queries, mem_q)
                mask = extend_mask(mask, mem_q.n_q)
                participants = None if cfg.memory_mask else (queries.origin == ORIGIN_GRID)
                if cfg.memory_mask:
                    mask = nms_on_active(params_to_array5(queries.reference), queries.confidence,
                                         mask, cfg.tau[0], heuristics=cfg.nms_heuristics)
                assert mask.n_q == n_grid + mem_q.n_q
            if len(memory) > 1:
                older = MemoryQueue(memory.capacity_frames, memory.budget)
                older.frames.extend(list(memory.frames)[:-1])
                old_q = align_memory(older, ego_pose, timestamp, self.params,
                                     use_velocity=cfg.use_velocity)
                memory_kv = old_q.features if old_q is not None else None

        if cfg.query_init == "dense":
            grid_kv = T.detach(grid.features)
        else:
            grid_kv = grid.features

        for layer in range(1, cfg.num_layers + 1):
            elig = mask.active_indices()
            if not cfg.memory_loss:
                elig = elig[queries.origin[elig] == ORIGIN_GRID]
            query_log.append(queries)
            queries, mask, out = self.decoder_layer(queries, mask, grid_kv, layer, memory_kv, participants)
            heads.append(out)
            eligible.append(elig)
            masks.append(mask)

        final = mask.active_indices()
        if not cfg.memory_loss:
            final = final[queries.origin[final] == ORIGIN_GRID]

        new_memory = memory
        if cfg.use_memory:
            new_memory = memory if memory is not None else MemoryQueue(cfg.memory_frames, cfg.memory_budget)
            out = heads[-1]
            dets = out.detections([int(i) for i in final])
            new_memory.push(dets, queries.features.data[final], ego_pose, timestamp)
        new_state = FrameState(grid=BevGrid(self.spec, T.detach(grid.features)), ego_pose=ego_pose,
                               timestamp=timestamp, memory=new_memory)
        return ForwardResult(grid=grid, heads=heads, eligible=eligible, masks=masks, queries=query_log,
                             final=final, state=new_state, first_stage_keep=keep0,
                             extras={"final_queries": queries})

    def _rotation_center(self):
        rc = self.config.rotation_center
        if rc == "grid_center":
            return rc
        if isinstance(rc, str):
            a, b = rc.split(",")
            return float(a), float(b)
        return rc

    def predict(self, observation, ego_pose=None, timestamp=0.0, state=None):
        with T.no_grad():
            res = self.forward(observation, ego_pose, timestamp, state, train=False)
        return res.detections(self.config.score_threshold), res


def assemble_hybrid_queries(grid_queries: QuerySet, memory_queries: QuerySet | None) -> QuerySet:
    """Concatenate grid-derived and memory-derived queries along the query axis."""
    if memory_queries is None or memory_queries.n_q == 0:
        return grid_queries
    if grid_queries.features.shape[1] != memory_queries.features.shape[1]:
        raise ValueError("grid and memory query widths differ")

    def cat(a, b):
        return np.concatenate([a, b])

    def live_of(q):
        return q.reference_live if q.reference_live is not None else Tensor(q.reference)

    live = None
    if grid_queries.reference_live is not None or memory_queries.reference_live is not None:
        live = T.concat([live_of(grid_queries), live_of(memory_queries)])
    scores = None
    if grid_queries.class_scores is not None and memory_queries.class_scores is not None:
        scores = cat(grid_queries.class_scores, memory_queries.class_scores)
    return QuerySet(
        features=T.concat([grid_queries.features, memory_queries.features], axis=0),
        reference=cat(grid_queries.reference, memory_queries.reference),
        origin=cat(grid_queries.origin, memory_queries.origin),
        confidence=cat(grid_queries.confidence, memory_queries.confidence),
        anchor_index=cat(grid_queries.anchor_index, memory_queries.anchor_index),
        reference_live=live,
        class_scores=scores,
    )


def extend_mask(mask: AttentionMask, n_new: int) -> AttentionMask:
    """Append ``n_new`` unsuppressed queries to ``mask``."""
    keep = np.concatenate([mask.active_indices(), mask.n_q + np.arange(n_new)])
    return build_attention_mask(keep, mask.n_q + n_new)


def look_forward_twice(heads: list) -> list:
    """Per-layer loss-facing box parameters of a decoder stack.

    The decoder builds these as it goes (layer ``i`` adds its regression to
    the previous layer's gradient-carrying box, while the reference it passes
    on is detached); this helper simply collects them.
    """
    return [h.pred for h in heads if h is not None]
