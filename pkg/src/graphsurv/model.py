"""Two-stream graph transformer producing per-patch and per-slide risk.

Architecture, end to end:
  1. per-scale graph-attention encoders (the high stream sees cell-type
     one-hots next to its features; either encoder can be ablated to a
     plain linear projection),
  2. decoupled propagation: a learnable mixture of adjacency powers
     applied once after encoding,
  3. a stack of transformer blocks where the low stream attends through a
     linearized (relu-kernel) attention whose similarity adds a
     child-averaged high-scale term, and the high stream self-attends
     with the same linearized kernel,
  4. a linear risk head on low-scale nodes; slide risk is the exact mean
     of patch risks.

All attention here is linear-time in node count: relu(Q) (relu(K)^T V)
with a row-normalizing denominator, never the dense N x N map. Dense
oracles for tests live at the bottom of the module.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .common import DataError, rng_for
from .graphs import MultiScaleGraph, build_multiscale
from .ingest import SlideBundle, TimeBins

N_TYPES = 5


@dataclass(frozen=True)
class ModelConfig:
    d: int
    hidden: int = 256
    gat_layers: int = 3
    prop_steps: int = 3
    blocks: int = 5
    n_bins: int = 4
    k_low: int = 8
    k_high: int = 8
    use_tie: bool = True   # topology-aware low-scale encoder
    use_hie: bool = True   # heterogeneity-aware high-scale encoder
    eps: float = 1e-6


@dataclass
class GATLayerParams:
    w: ad.Tensor  # (in, out)
    a: ad.Tensor  # (2*out, 1) attention vector, [dst half; src half]


@dataclass
class StreamBlockParams:
    w_q: ad.Tensor
    w_k: ad.Tensor
    w_v: ad.Tensor
    ln1_g: ad.Tensor
    ln1_b: ad.Tensor
    ffn_w1: ad.Tensor
    ffn_b1: ad.Tensor
    ffn_w2: ad.Tensor
    ffn_b2: ad.Tensor
    ln2_g: ad.Tensor
    ln2_b: ad.Tensor


@dataclass
class BlockParams:
    low: StreamBlockParams
    high: StreamBlockParams


@dataclass
class SlideInputs:
    """Precomputed per-slide constants: features, typed features, graph."""

    x_low: np.ndarray
    x_high: np.ndarray
    x_high_typed: np.ndarray
    graph: MultiScaleGraph


def prepare_inputs(slide: SlideBundle, config: ModelConfig,
                   half_width: float = 128.0) -> SlideInputs:
    graph = build_multiscale(slide, k_low=config.k_low, k_high=config.k_high,
                             half_width=half_width)
    x_high = slide.x_high()
    one_hot = np.zeros((x_high.shape[0], N_TYPES))
    one_hot[np.arange(x_high.shape[0]), graph.types_high] = 1.0
    return SlideInputs(
        x_low=slide.x_low(),
        x_high=x_high,
        x_high_typed=np.concatenate([one_hot, x_high], axis=1),
        graph=graph,
    )


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def gat_layer(x: ad.Tensor, p: GATLayerParams, edges: ad.EdgeList) -> ad.Tensor:
    """One graph-attention layer: softmax over in-neighbourhoods, relu output."""
    out_dim = p.w.shape[1]
    hw = ad.matmul(x, p.w)
    score_dst = ad.matmul(hw, ad.slice_rows(p.a, 0, out_dim))
    score_src = ad.matmul(hw, ad.slice_rows(p.a, out_dim, 2 * out_dim))
    scores = ad.leaky_relu(ad.add(ad.take_rows(score_dst, edges.dst),
                                  ad.take_rows(score_src, edges.src)))
    alpha = ad.segment_softmax(scores, edges.dst_ptr)
    return ad.relu(ad.edge_aggregate(alpha, hw, edges))


def propagate(x: ad.Tensor, adj, betas: list[ad.Tensor]) -> ad.Tensor:
    """Learnable mixture of normalized adjacency powers: sum_s beta_s A^s x."""
    acc = ad.scalar_mul(x, betas[0])
    cur = x
    for beta in betas[1:]:
        cur = ad.spmm(adj, cur)
        acc = ad.add(acc, ad.scalar_mul(cur, beta))
    return acc


def sla_attention(q: ad.Tensor, k: ad.Tensor, v: ad.Tensor, eps: float) -> ad.Tensor:
    """Linearized self-attention relu(Q) (relu(K)^T V) / (relu(Q) relu(K)^T 1 + eps)."""
    rq, rk = ad.relu(q), ad.relu(k)
    ones = ad.constant(np.ones((k.shape[0], 1)))
    num = ad.matmul(rq, ad.matmul(ad.transpose(rk), v))
    den = ad.matmul(rq, ad.matmul(ad.transpose(rk), ones))
    return ad.divide_rows(num, ad.add_const(den, eps))


def _post_attention(x: ad.Tensor, attn: ad.Tensor, p: StreamBlockParams) -> ad.Tensor:
    """Post-norm transformer tail: LN(x + attn), then LN(. + FFN(.))."""
    a = ad.layer_norm(ad.add(x, attn), p.ln1_g, p.ln1_b)
    hidden = ad.relu(ad.add_rowvec(ad.matmul(a, p.ffn_w1), p.ffn_b1))
    f = ad.add_rowvec(ad.matmul(hidden, p.ffn_w2), p.ffn_b2)
    return ad.layer_norm(ad.add(a, f), p.ln2_g, p.ln2_b)


def fused_low_attention(ql: ad.Tensor, kl: ad.Tensor, vl: ad.Tensor,
                        qh: ad.Tensor, kh: ad.Tensor,
                        graph: MultiScaleGraph, eps: float) -> ad.Tensor:
    """Low-stream attention whose similarity adds a child-averaged high term.

    Similarity is relu(Q_L) relu(K_L)^T plus the product of child-averaged
    relu(Q_H) and relu(K_H); averaging before the product equals the mean
    over child pairs by bilinearity, which keeps the whole thing linear in
    node count. Rows with no low support and no children divide to zero.
    """
    rql, rkl = ad.relu(ql), ad.relu(kl)
    rqh, rkh = ad.relu(qh), ad.relu(kh)
    phi_q = ad.spmm(graph.pool_op, rqh)
    phi_k = ad.spmm(graph.pool_op, rkh)
    ones_low = ad.constant(np.ones((ql.shape[0], 1)))
    num = ad.add(ad.matmul(rql, ad.matmul(ad.transpose(rkl), vl)),
                 ad.matmul(phi_q, ad.matmul(ad.transpose(phi_k), vl)))
    den = ad.add(ad.matmul(rql, ad.matmul(ad.transpose(rkl), ones_low)),
                 ad.matmul(phi_q, ad.matmul(ad.transpose(phi_k), ones_low)))
    return ad.divide_rows(num, ad.add_const(den, eps))


def fused_block(h: ad.Tensor, z: ad.Tensor, bp: BlockParams,
                graph: MultiScaleGraph, eps: float) -> tuple[ad.Tensor, ad.Tensor]:
    """One transformer block: fused attention on the low stream, plain
    linearized self-attention on the high stream, post-norm tails on both."""
    qh = ad.matmul(z, bp.high.w_q)
    kh = ad.matmul(z, bp.high.w_k)
    vh = ad.matmul(z, bp.high.w_v)
    ql = ad.matmul(h, bp.low.w_q)
    kl = ad.matmul(h, bp.low.w_k)
    vl = ad.matmul(h, bp.low.w_v)
    low_attn = fused_low_attention(ql, kl, vl, qh, kh, graph, eps)
    high_attn = sla_attention(qh, kh, vh, eps)
    return (_post_attention(h, low_attn, bp.low),
            _post_attention(z, high_attn, bp.high))


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

class SurvivalModel:
    """Holds all learnable tensors and runs the forward pass."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        rng = rng_for(seed, 7)

        def lin(fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            return ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))

        def gat_stack(in_dim):
            # relu-gain weights, widened further because attention averages
            # ~k neighbours per layer and shrinks variance; 1.4 per layer
            # keeps the stack's output scale near a plain projection's.
            # Columns come in +/- pairs so every pre-activation u appears as
            # relu(u) and relu(-u): the relu stack starts linearly invertible
            # instead of discarding half of each layer's input directions.
            # Near-zero attention vectors start every neighbourhood close to
            # uniform weighting (exact zeros would sit on the LeakyReLU kink)
            layers = []
            for i in range(config.gat_layers):
                d_in = in_dim if i == 0 else config.hidden
                bound = 1.4 * np.sqrt(6.0 / d_in)
                half_w = rng.uniform(-bound, bound, size=(d_in, (config.hidden + 1) // 2))
                w = ad.parameter(np.concatenate([half_w, -half_w], axis=1)[:, :config.hidden])
                a = ad.parameter(rng.uniform(-1e-2, 1e-2, size=(2 * config.hidden, 1)))
                layers.append(GATLayerParams(w=w, a=a))
            return layers

        h = config.hidden
        if config.use_tie:
            self.low_encoder = gat_stack(config.d)
            self.low_proj = None
        else:
            self.low_encoder = []
            self.low_proj = lin(config.d, h)
        if config.use_hie:
            self.high_encoder = gat_stack(config.d + N_TYPES)
            self.high_proj = None
        else:
            self.high_encoder = []
            self.high_proj = lin(config.d, h)

        init_beta = 1.0 / (config.prop_steps + 1)
        self.beta_low = [ad.parameter([[init_beta]]) for _ in range(config.prop_steps + 1)]
        self.beta_high = [ad.parameter([[init_beta]]) for _ in range(config.prop_steps + 1)]

        def stream_block():
            return StreamBlockParams(
                w_q=lin(h, h), w_k=lin(h, h), w_v=lin(h, h),
                ln1_g=ad.parameter(np.ones((1, h))), ln1_b=ad.parameter(np.zeros((1, h))),
                ffn_w1=lin(h, 2 * h), ffn_b1=ad.parameter(np.zeros((1, 2 * h))),
                ffn_w2=lin(2 * h, h), ffn_b2=ad.parameter(np.zeros((1, h))),
                ln2_g=ad.parameter(np.ones((1, h))), ln2_b=ad.parameter(np.zeros((1, h))),
            )

        self.blocks = [BlockParams(low=stream_block(), high=stream_block())
                       for _ in range(config.blocks)]
        self.head_w = lin(h, 1)
        self.head_b = ad.parameter(np.zeros((1, 1)))
        self.bin_offsets = ad.parameter(np.zeros((1, config.n_bins)))

    # -- parameter registry --------------------------------------------------

    def params(self) -> list[tuple[str, ad.Tensor]]:
        out: list[tuple[str, ad.Tensor]] = []
        for prefix, stack in (("low_enc", self.low_encoder), ("high_enc", self.high_encoder)):
            for i, layer in enumerate(stack):
                out.append((f"{prefix}.{i}.w", layer.w))
                out.append((f"{prefix}.{i}.a", layer.a))
        if self.low_proj is not None:
            out.append(("low_proj", self.low_proj))
        if self.high_proj is not None:
            out.append(("high_proj", self.high_proj))
        for name, betas in (("beta_low", self.beta_low), ("beta_high", self.beta_high)):
            for s, b in enumerate(betas):
                out.append((f"{name}.{s}", b))
        for i, bp in enumerate(self.blocks):
            for stream_name, sp in (("low", bp.low), ("high", bp.high)):
                for field in ("w_q", "w_k", "w_v", "ln1_g", "ln1_b",
                              "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln2_g", "ln2_b"):
                    out.append((f"blocks.{i}.{stream_name}.{field}", getattr(sp, field)))
        out.append(("head.w", self.head_w))
        out.append(("head.b", self.head_b))
        out.append(("bin_offsets", self.bin_offsets))
        return out

    def tensors(self) -> list[ad.Tensor]:
        return [t for _, t in self.params()]

    # -- forward --------------------------------------------------------------

    def forward(self, inputs: SlideInputs) -> tuple[ad.Tensor, ad.Tensor]:
        """Returns (patch_risks (n_low, 1), slide_risk (1, 1))."""
        cfg = self.config
        g = inputs.graph
        if cfg.use_tie:
            h = ad.constant(inputs.x_low)
            for layer in self.low_encoder:
                h = gat_layer(h, layer, g.edges_low)
        else:
            h = ad.matmul(ad.constant(inputs.x_low), self.low_proj)
        if cfg.use_hie:
            z = ad.constant(inputs.x_high_typed)
            for layer in self.high_encoder:
                z = gat_layer(z, layer, g.edges_high)
        else:
            z = ad.matmul(ad.constant(inputs.x_high), self.high_proj)
        h = propagate(h, g.adj_low, self.beta_low)
        z = propagate(z, g.adj_high, self.beta_high)
        for bp in self.blocks:
            h, z = fused_block(h, z, bp, g, cfg.eps)
        risks = ad.add_rowvec(ad.matmul(h, self.head_w), self.head_b)
        return risks, ad.mean_all(risks)


# ---------------------------------------------------------------------------
# checkpointing: one file, length-prefixed JSON header + raw float64 blobs
# ---------------------------------------------------------------------------

_MAGIC = b"GSRV"


def save_checkpoint(path, model: SurvivalModel, bins: TimeBins,
                    extra: dict | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, t in model.params():
        raw = t.values.astype("<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": asdict(model.config),
        "time_bins": [float(e) for e in bins.edges],
        "params": entries,
        "extra": extra or {},
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(encoded)))
        f.write(encoded)
        f.write(b"".join(blobs))


def load_checkpoint(path) -> tuple[SurvivalModel, TimeBins, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise DataError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    body = raw[12 + hlen:]
    config = ModelConfig(**header["config"])
    model = SurvivalModel(config, seed=0)
    by_name = dict(model.params())
    seen = set()
    for entry in header["params"]:
        name = entry["name"]
        if name not in by_name:
            raise DataError(f"{path}: unknown parameter {name!r}")
        shape = tuple(entry["shape"])
        if by_name[name].shape != shape:
            raise DataError(f"{path}: parameter {name!r} has shape {shape}, "
                            f"expected {by_name[name].shape}")
        count = int(np.prod(shape))
        start = entry["offset"]
        vals = np.frombuffer(body, dtype="<f8", count=count, offset=start)
        by_name[name].values = vals.reshape(shape).copy()
        seen.add(name)
    missing = set(by_name) - seen
    if missing:
        raise DataError(f"{path}: checkpoint is missing parameters {sorted(missing)}")
    return model, TimeBins(edges=np.array(header["time_bins"])), header["extra"]


# ---------------------------------------------------------------------------
# dense oracles (test and benchmark reference implementations, plain numpy)
# ---------------------------------------------------------------------------

def dense_sla_oracle(q: np.ndarray, k: np.ndarray, v: np.ndarray, eps: float) -> np.ndarray:
    """O(N^2 D) reference for sla_attention."""
    s = np.maximum(q, 0.0) @ np.maximum(k, 0.0).T
    return (s @ v) / (s.sum(axis=1, keepdims=True) + eps)


def linear_sla_numpy(q: np.ndarray, k: np.ndarray, v: np.ndarray, eps: float) -> np.ndarray:
    """O(N D^2) plain-numpy forward, for timing against the dense oracle."""
    rq, rk = np.maximum(q, 0.0), np.maximum(k, 0.0)
    num = rq @ (rk.T @ v)
    den = rq @ rk.sum(axis=0, keepdims=True).T + eps
    return num / den


def dense_fusion_oracle(ql, kl, vl, qh, kh, children, eps) -> np.ndarray:
    """O(N^2) reference for the low-stream fused attention.

    The cross-scale term is the mean of relu(Q_H,c) . relu(K_H,c') over
    child pairs (c, c'), written out literally.
    """
    rql, rkl = np.maximum(ql, 0.0), np.maximum(kl, 0.0)
    rqh, rkh = np.maximum(qh, 0.0), np.maximum(kh, 0.0)
    n = ql.shape[0]
    s = rql @ rkl.T
    for v_node in range(n):
        for u_node in range(n):
            cv, cu = children[v_node], children[u_node]
            if cv.size == 0 or cu.size == 0:
                continue
            total = 0.0
            for c in cv:
                for c2 in cu:
                    total += float(rqh[c] @ rkh[c2])
            s[v_node, u_node] += total / (cv.size * cu.size)
    return (s @ vl) / (s.sum(axis=1, keepdims=True) + eps)


def dense_gat_oracle(x, w, a, dst, src, slope=0.2):
    """Dense per-edge loop reference for gat_layer."""
    hw = x @ w
    out_dim = w.shape[1]
    n = x.shape[0]
    out = np.zeros((n, out_dim))
    for v in range(n):
        nbr = [int(s) for d, s in zip(dst, src) if d == v]
        scores = []
        for u in nbr:
            raw = float(a[:out_dim, 0] @ hw[v] + a[out_dim:, 0] @ hw[u])
            scores.append(raw if raw > 0 else slope * raw)
        scores = np.array(scores)
        alpha = np.exp(scores - scores.max())
        alpha /= alpha.sum()
        agg = sum(al * hw[u] for al, u in zip(alpha, nbr))
        out[v] = np.maximum(agg, 0.0)
    return out
