"""The training-only graph teacher.

Pipeline per image: unimodal Transformer enrichment of patch and prompt
features, a typed patch-text graph, relation-aware graph-transformer layers,
discriminative node filtering, and cosine logits against the enriched text
nodes. Everything here is built on the differentiation tape and none of it
survives into the exported student.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, TopologyError
from .numcore import Param, constant, tape

REL_PP, REL_PT, REL_TP = 0, 1, 2
NODE_PATCH, NODE_TEXT = 0, 1

FFN_MULT = 2  # feed-forward expansion factor


# ---------------------------------------------------------------------------
# parameters


@dataclass
class EncoderLayerParams:
    wq: list
    wk: list
    wv: list
    wo: Param
    ffn_w1: Param
    ffn_b1: Param
    ffn_w2: Param
    ffn_b2: Param
    ln1_gamma: Param
    ln1_beta: Param
    ln2_gamma: Param
    ln2_beta: Param

    def parameters(self):
        yield from self.wq
        yield from self.wk
        yield from self.wv
        yield self.wo
        yield from (self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2,
                    self.ln1_gamma, self.ln1_beta, self.ln2_gamma, self.ln2_beta)


@dataclass
class EncoderParams:
    in_proj: Param
    layers: list
    heads: int

    def parameters(self):
        yield self.in_proj
        for layer in self.layers:
            yield from layer.parameters()


@dataclass
class MgtLayerParams:
    # indexed [head][node_type] for projections, [head][relation] for adapters
    wq: list
    wk: list
    wv: list
    wk_rel: list
    wv_rel: list
    bias_rel: Param  # (3, heads)
    rho_rel: Param   # (3, heads); gate = softplus(rho) > 0 by construction
    wo: list         # per node type
    ffn_w1: list
    ffn_b1: list
    ffn_w2: list
    ffn_b2: list
    ln_gamma: list
    ln_beta: list

    def parameters(self):
        for grid in (self.wq, self.wk, self.wv, self.wk_rel, self.wv_rel):
            for row in grid:
                yield from row
        yield self.bias_rel
        yield self.rho_rel
        for group in (self.wo, self.ffn_w1, self.ffn_b1, self.ffn_w2,
                      self.ffn_b2, self.ln_gamma, self.ln_beta):
            yield from group


@dataclass
class NodeFilter:
    direction: Param  # (1, d_h), nonzero
    keep_frac: float  # in (0, 1]

    def parameters(self):
        yield self.direction


@dataclass
class TeacherParams:
    vis_encoder: EncoderParams
    text_encoder: EncoderParams
    mgt_layers: list
    node_filter: NodeFilter
    dim: int
    hidden: int
    mgt_heads: int

    def parameters(self):
        yield from self.vis_encoder.parameters()
        yield from self.text_encoder.parameters()
        for layer in self.mgt_layers:
            yield from layer.parameters()
        yield from self.node_filter.parameters()


def _uniform(rng, fan_in, shape, name):
    bound = 1.0 / math.sqrt(fan_in)
    return Param(rng.uniform(-bound, bound, size=shape), name=name)


def _partial_identity(rows, cols):
    eye = np.zeros((rows, cols))
    np.fill_diagonal(eye, 1.0)
    return eye


def _value_slices(d_h, heads):
    """Per-head identity column slices; concatenated heads reproduce the
    input exactly, so attention starts as pure feature smoothing."""
    d_k = d_h // heads
    return [np.eye(d_h)[:, j * d_k:(j + 1) * d_k].copy() for j in range(heads)]


def _identity_ffn(d_h, tag):
    """gelu(x) - gelu(-x) = x, so the [I, -I] pair makes the feed-forward an
    exact identity at init while keeping every weight trainable."""
    f = FFN_MULT * d_h
    if f == 2 * d_h:
        w1 = np.hstack([np.eye(d_h), -np.eye(d_h)])
        w2 = np.vstack([np.eye(d_h), -np.eye(d_h)])
    else:  # non-default multiplier: fall back to a silent branch
        w1 = _partial_identity(d_h, f)
        w2 = np.zeros((f, d_h))
    return (Param(w1, name=f"{tag}.ffn_w1"),
            Param(np.zeros((1, f)), name=f"{tag}.ffn_b1"),
            Param(w2, name=f"{tag}.ffn_w2"),
            Param(np.zeros((1, d_h)), name=f"{tag}.ffn_b2"))


def _init_encoder_layer(rng, d_h, heads, tag):
    # queries and keys start tied, so attention scores are content
    # similarities in a random sketch; values/output start at identity. The
    # untrained block is then residual similarity-smoothing, which preserves
    # the frozen embedding geometry instead of scrambling it.
    d_k = d_h // heads
    wq = [_uniform(rng, d_h, (d_h, d_k), f"{tag}.wq{j}") for j in range(heads)]
    wk = [Param(q.value.copy(), name=f"{tag}.wk{j}") for j, q in enumerate(wq)]
    w1, b1, w2, b2 = _identity_ffn(d_h, tag)
    return EncoderLayerParams(
        wq=wq,
        wk=wk,
        wv=[Param(s, name=f"{tag}.wv{j}")
            for j, s in enumerate(_value_slices(d_h, heads))],
        wo=Param(np.eye(d_h), name=f"{tag}.wo"),
        ffn_w1=w1, ffn_b1=b1, ffn_w2=w2, ffn_b2=b2,
        ln1_gamma=Param(np.ones((1, d_h)), name=f"{tag}.ln1_gamma"),
        ln1_beta=Param(np.zeros((1, d_h)), name=f"{tag}.ln1_beta"),
        ln2_gamma=Param(np.ones((1, d_h)), name=f"{tag}.ln2_gamma"),
        ln2_beta=Param(np.zeros((1, d_h)), name=f"{tag}.ln2_beta"),
    )


def _init_encoder(rng, dim, d_h, layers, heads, tag):
    return EncoderParams(
        in_proj=Param(_partial_identity(dim, d_h), name=f"{tag}.in_proj"),
        layers=[_init_encoder_layer(rng, d_h, heads, f"{tag}.l{i}")
                for i in range(layers)],
        heads=heads,
    )


def _init_mgt_layer(rng, d_h, heads, tag):
    d_k = d_h // heads
    eye = np.eye(d_k)
    # relation adapters start at identity, biases at zero and gates at one,
    # so an untrained layer is a plain typed transformer; with the identity
    # FFN the message path is live (not silenced) from the first step
    rho0 = math.log(math.e - 1.0)
    wq = [[_uniform(rng, d_h, (d_h, d_k), f"{tag}.wq{h}t{t}") for t in range(2)]
          for h in range(heads)]
    wk = [[Param(wq[h][t].value.copy(), name=f"{tag}.wk{h}t{t}")
           for t in range(2)] for h in range(heads)]
    slices = _value_slices(d_h, heads)
    ffns = [_identity_ffn(d_h, f"{tag}.t{t}") for t in range(2)]
    return MgtLayerParams(
        wq=wq,
        wk=wk,
        wv=[[Param(slices[h].copy(), name=f"{tag}.wv{h}t{t}") for t in range(2)]
            for h in range(heads)],
        wk_rel=[[Param(eye.copy(), name=f"{tag}.wkrel{h}r{r}") for r in range(3)]
                for h in range(heads)],
        wv_rel=[[Param(eye.copy(), name=f"{tag}.wvrel{h}r{r}") for r in range(3)]
                for h in range(heads)],
        bias_rel=Param(np.zeros((3, heads)), name=f"{tag}.bias_rel"),
        rho_rel=Param(np.full((3, heads), rho0), name=f"{tag}.rho_rel"),
        wo=[Param(np.eye(d_h), name=f"{tag}.wo_t{t}") for t in range(2)],
        ffn_w1=[ffns[t][0] for t in range(2)],
        ffn_b1=[ffns[t][1] for t in range(2)],
        ffn_w2=[ffns[t][2] for t in range(2)],
        ffn_b2=[ffns[t][3] for t in range(2)],
        ln_gamma=[Param(np.ones((1, d_h)), name=f"{tag}.lng_t{t}") for t in range(2)],
        ln_beta=[Param(np.zeros((1, d_h)), name=f"{tag}.lnb_t{t}") for t in range(2)],
    )


def modality_gap_direction(prompts, patch_rows):
    """Unit direction from the mean patch embedding toward the mean prompt
    embedding. Prompts and generic patches occupy separate cones in a frozen
    joint embedding space, so this offset scores a patch by how prompt-like
    its content is; it needs no labels or foreground annotations."""
    t = prompts.mean(axis=0)
    t = t / np.linalg.norm(t)
    m = patch_rows.reshape(-1, patch_rows.shape[-1]).mean(axis=0)
    m = m / np.linalg.norm(m)
    gap = t - m
    norm = np.linalg.norm(gap)
    if norm <= 1e-12:
        raise ConfigError("prompt and patch means coincide; no gap direction")
    return gap / norm


def init_teacher(dim, hidden, enc_layers, enc_heads, mgt_layers, mgt_heads,
                 keep_frac, seed, filter_direction=None):
    """Fresh teacher parameters; fully determined by seed.

    filter_direction, when given, seeds the node filter in input coordinates
    (padded or truncated to the hidden width); hard top-N selection gives the
    direction no gradient, so its starting point decides what the filter
    looks for. The trainer passes the modality-gap direction; the default is
    a random unit vector.
    """
    if hidden % enc_heads or hidden % mgt_heads:
        raise ConfigError("hidden width must be divisible by the head counts")
    if not 0.0 < keep_frac <= 1.0:
        raise ConfigError("keep_frac must be in (0, 1]")
    rng = np.random.default_rng(seed)
    vis = _init_encoder(rng, dim, hidden, enc_layers, enc_heads, "vis")
    text = _init_encoder(rng, dim, hidden, enc_layers, enc_heads, "text")
    layers = [_init_mgt_layer(rng, hidden, mgt_heads, f"mgt{i}")
              for i in range(mgt_layers)]
    if filter_direction is None:
        direction = rng.normal(size=(1, hidden))
    else:
        direction = np.zeros((1, hidden))
        width = min(hidden, len(filter_direction))
        direction[0, :width] = np.asarray(filter_direction)[:width]
    direction /= np.linalg.norm(direction)
    node_filter = NodeFilter(direction=Param(direction, name="filter.p"),
                             keep_frac=keep_frac)
    return TeacherParams(vis_encoder=vis, text_encoder=text, mgt_layers=layers,
                         node_filter=node_filter, dim=dim, hidden=hidden,
                         mgt_heads=mgt_heads)


# ---------------------------------------------------------------------------
# graph topology


@dataclass(frozen=True)
class GraphTopology:
    """Typed nodes (patches then text) and typed directed edges, relation
    blocks ordered pp, pt, tp; within a block, target-major."""

    num_patches: int
    num_text: int
    src: np.ndarray
    dst: np.ndarray
    rel_slices: tuple  # ((start, stop) per relation code)

    @property
    def num_nodes(self):
        return self.num_patches + self.num_text

    @property
    def num_edges(self):
        return len(self.src)

    def node_types(self):
        return np.concatenate([np.zeros(self.num_patches, dtype=np.int64),
                               np.ones(self.num_text, dtype=np.int64)])


@lru_cache(maxsize=None)
def build_graph(num_patches, num_text):
    """pp edges between all ordered patch pairs (self-loops included);
    every patch feeds every text node (pt) and vice versa (tp)."""
    if num_patches < 1 or num_text < 0:
        raise ConfigError("need at least one patch node")
    m, c = num_patches, num_text
    src_blocks, dst_blocks, slices = [], [], []
    start = 0

    # pp: target-major over patches
    dst_blocks.append(np.repeat(np.arange(m), m))
    src_blocks.append(np.tile(np.arange(m), m))
    slices.append((start, start + m * m))
    start += m * m

    # pt: patch sources into each text target
    dst_blocks.append(np.repeat(np.arange(m, m + c), m))
    src_blocks.append(np.tile(np.arange(m), c))
    slices.append((start, start + m * c))
    start += m * c

    # tp: text sources into each patch target
    dst_blocks.append(np.repeat(np.arange(m), c))
    src_blocks.append(np.tile(np.arange(m, m + c), m))
    slices.append((start, start + c * m))
    start += c * m

    return GraphTopology(
        num_patches=m, num_text=c,
        src=np.concatenate(src_blocks).astype(np.int64),
        dst=np.concatenate(dst_blocks).astype(np.int64),
        rel_slices=tuple(slices),
    )


# ---------------------------------------------------------------------------
# forward passes (tape-based)


def _ffn(x, w1, b1, w2, b2):
    h = tape.add(tape.matmul(x, w1), b1)
    return tape.add(tape.matmul(tape.gelu(h), w2), b2)


def encode_unimodal(features, enc):
    """Input projection then post-norm Transformer blocks: self-attention,
    residual + LN, feed-forward, residual + LN."""
    h = tape.matmul(features, enc.in_proj)
    for layer in enc.layers:
        d_k = layer.wq[0].value.shape[1]
        inv = 1.0 / math.sqrt(d_k)
        heads = []
        for j in range(enc.heads):
            q = tape.matmul(h, layer.wq[j])
            k = tape.matmul(h, layer.wk[j])
            v = tape.matmul(h, layer.wv[j])
            att = tape.softmax_rows(tape.scale(tape.matmul(q, tape.transpose(k)), inv))
            heads.append(tape.matmul(att, v))
        z = tape.matmul(tape.concat_cols(heads), layer.wo)
        h = tape.layer_norm(tape.add(h, z), layer.ln1_gamma, layer.ln1_beta)
        f = _ffn(h, layer.ffn_w1, layer.ffn_b1, layer.ffn_w2, layer.ffn_b2)
        h = tape.layer_norm(tape.add(h, f), layer.ln2_gamma, layer.ln2_beta)
    return h


def _edge_rel_codes(topo):
    codes = np.empty(topo.num_edges, dtype=np.int64)
    for r, (lo, hi) in enumerate(topo.rel_slices):
        codes[lo:hi] = r
    return codes


def mgt_layer(h_nodes, topo, layer):
    """One relation-aware graph-transformer layer.

    Attention scores carry a relation bias and compete jointly across all
    incoming edges of a target; messages are scaled by the positive relation
    gates, summed per target, concatenated over heads, projected per node
    type and fed through the type's FFN inside a single residual + LN.
    """
    n = topo.num_nodes
    if h_nodes.value.shape[0] != n:
        raise TopologyError(f"{h_nodes.value.shape[0]} node rows for {n}-node graph")
    if np.bincount(topo.dst, minlength=n).min() == 0:
        raise TopologyError("graph has a target with no incoming edges")
    heads = len(layer.wq)
    d_k = layer.wq[0][0].value.shape[1]
    inv = 1.0 / math.sqrt(d_k)
    p_rows = topo.num_patches
    type_slices = [(0, p_rows), (p_rows, n)]
    rel_codes = _edge_rel_codes(topo)

    bias_edges = tape.gather_rows(layer.bias_rel, rel_codes)      # (E, H)
    gate_edges = tape.gather_rows(tape.softplus(layer.rho_rel), rel_codes)

    score_cols, v_tilde = [], []
    for h in range(heads):
        q = tape.block_matmul(h_nodes, type_slices, layer.wq[h])
        k = tape.block_matmul(h_nodes, type_slices, layer.wk[h])
        v = tape.block_matmul(h_nodes, type_slices, layer.wv[h])
        k_e = tape.block_matmul(tape.gather_rows(k, topo.src), topo.rel_slices,
                                layer.wk_rel[h])
        v_tilde.append(tape.block_matmul(tape.gather_rows(v, topo.src),
                                         topo.rel_slices, layer.wv_rel[h]))
        q_e = tape.gather_rows(q, topo.dst)
        score_cols.append(tape.scale(tape.rowwise_dot(q_e, k_e), inv))

    scores = tape.add(tape.concat_cols(score_cols), bias_edges)
    attn = tape.segment_softmax(scores, topo.dst, n)              # (E, H)
    weights = tape.mul(attn, gate_edges)

    msgs = [tape.segment_sum(tape.mul(tape.slice_cols(weights, h, h + 1), v_tilde[h]),
                             topo.dst, n)
            for h in range(heads)]
    m = tape.concat_cols(msgs)                                    # (n, d_h)

    m_proj = tape.block_matmul(m, type_slices, layer.wo)
    out_blocks = []
    blocks = [(0, p_rows, NODE_PATCH)]
    if topo.num_text:
        blocks.append((p_rows, n, NODE_TEXT))
    for lo, hi, t in blocks:
        f_t = _ffn(tape.slice_rows(m_proj, lo, hi), layer.ffn_w1[t],
                   layer.ffn_b1[t], layer.ffn_w2[t], layer.ffn_b2[t])
        res = tape.add(tape.slice_rows(h_nodes, lo, hi), f_t)
        out_blocks.append(tape.layer_norm(res, layer.ln_gamma[t], layer.ln_beta[t]))
    return tape.concat_rows(out_blocks) if len(out_blocks) > 1 else out_blocks[0]


def mgt_forward(vis, text, topo, layers):
    """Stack mgt_layer over the concatenated node set; returns the split
    (vis', text') blocks. text may be None for a patch-only graph."""
    nodes = tape.concat_rows([vis, text]) if text is not None else vis
    for layer in layers:
        nodes = mgt_layer(nodes, topo, layer)
    p = topo.num_patches
    vis_out = tape.slice_rows(nodes, 0, p)
    text_out = tape.slice_rows(nodes, p, topo.num_nodes) if text is not None else None
    return vis_out, text_out


def filter_scores(vis_nodes, direction):
    """Cosine of each node feature with the filter direction (plain values;
    top-N selection is discrete so no gradient flows through the scores)."""
    h = vis_nodes.value if hasattr(vis_nodes, "value") else np.asarray(vis_nodes)
    p = direction.value if hasattr(direction, "value") else np.asarray(direction)
    p = p.ravel()
    norms = np.linalg.norm(h, axis=1) * np.linalg.norm(p)
    return (h @ p) / norms


def select_top(scores, keep_frac):
    """Indices of the top ceil(frac * P) scores, ties broken by lower index."""
    p = len(scores)
    k = int(math.ceil(keep_frac * p))
    order = np.lexsort((np.arange(p), -scores))
    return np.sort(order[:k])


def filter_and_pool(vis_nodes, node_filter):
    """Keep the highest-scoring fraction of nodes, sum them, normalize.

    With keep_frac = 1 this is exactly global sum pooling. Returns the unit
    pooled feature, the kept indices, and the scores.
    """
    scores = filter_scores(vis_nodes, node_filter.direction)
    kept = select_top(scores, node_filter.keep_frac)
    pooled = tape.matmul(constant(np.ones((1, len(kept)))),
                         tape.gather_rows(vis_nodes, kept))
    return tape.l2_normalize_rows(pooled), kept, scores


def graph_logits(f_graph, text_nodes):
    """Cosine of the pooled visual feature against each re-normalized text
    node; (1, C) raw cosines."""
    return tape.matmul(f_graph, tape.transpose(tape.l2_normalize_rows(text_nodes)))


@dataclass
class TeacherOutput:
    logits: object          # (1, C) node of raw cosines
    kept: np.ndarray
    scores: np.ndarray
    vis_nodes: object = field(default=None, repr=False)
    text_nodes: object = field(default=None, repr=False)


def teacher_forward(features, prompts, params, use_mgt=True, use_text_edges=True,
                    view_indices=None, text_override=None):
    """Full teacher branch for one image.

    features: (M, D) constant or node of unit patch rows; prompts: (C, D).
    With use_mgt off the filtered unimodal features are pooled directly; with
    text edges off the graph is patch-only and logits use the unimodal text
    encoding. text_override, when given, is an already-encoded unimodal text
    node reused across the images of a batch (prompts are image-independent,
    so sharing the subgraph also accumulates its gradients correctly).
    """
    feats = features if hasattr(features, "value") else constant(features)
    proms = prompts if hasattr(prompts, "value") else constant(prompts)
    if view_indices is not None:
        feats = tape.gather_rows(feats, np.asarray(view_indices, dtype=np.int64))
    num_patches = feats.value.shape[0]
    num_text = proms.value.shape[0]

    vis = encode_unimodal(feats, params.vis_encoder)
    text = (text_override if text_override is not None
            else encode_unimodal(proms, params.text_encoder))

    if use_mgt and params.mgt_layers:
        if use_text_edges:
            topo = build_graph(num_patches, num_text)
            vis, text_mixed = mgt_forward(vis, text, topo, params.mgt_layers)
            text = text_mixed
        else:
            topo = build_graph(num_patches, 0)
            vis, _ = mgt_forward(vis, None, topo, params.mgt_layers)

    f_graph, kept, scores = filter_and_pool(vis, params.node_filter)
    logits = graph_logits(f_graph, text)
    return TeacherOutput(logits=logits, kept=kept, scores=scores,
                         vis_nodes=vis, text_nodes=text)
