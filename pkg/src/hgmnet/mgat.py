"""Heterogeneous graph attention over text, CPC and citation nodes.

Only text nodes aggregate messages.  For an edge ``p -> q`` into a text node
the coefficient is the cross-modal gate

    alpha = softmax over m' of leaky_relu(a[m1, m'] . [W[m1] h_p || W[m'] h_q])

taken at ``m' = text``, where ``m1`` is the modality of ``p``.  Per head the
update sums ``alpha * gamma[m1] * W[m1] h_p`` over neighbors and self loop,
heads are concatenated and an ELU is applied.  CPC and citation nodes only
see their own self loop, with coefficient 1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Hashable, Sequence

import numpy as np

from .errors import DegenerateInputWarning, DimensionError, ValidationError
from .features import CpcEmbedder, EmbeddingTable, TfIdfModel, cite_init, cpc_embed, cpc_parse, \
    embed_text_node, tfidf_fit
from .numkit import Rng, Var, ad
from .numkit.tape import lift
from .textseg import content_tokens, tokenize

MODALITIES = ("text", "cpc", "cite")
EDGE_KINDS = ("semantic", "hierarchy", "citation")
LEAKY_SLOPE = 0.2
GAMMA_INIT = float(np.log(np.e - 1.0))  # softplus(GAMMA_INIT) == 1


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    kind: str
    weight: float = 1.0


@dataclass
class HeteroGraph:
    ids: list = field(default_factory=list)
    modality: list[str] = field(default_factory=list)
    rows: list[np.ndarray] = field(default_factory=list)
    edges: list[Edge] = field(default_factory=list)
    _index: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.ids)

    def add_node(self, node_id: Hashable, modality: str, feature) -> int:
        if modality not in MODALITIES:
            raise ValidationError(f"unknown modality {modality!r}")
        if node_id in self._index:
            raise ValidationError(f"duplicate node id {node_id!r}")
        feature = np.asarray(feature, dtype=np.float64).ravel()
        if self.rows and feature.size != self.rows[0].size:
            raise DimensionError(f"node {node_id!r} has width {feature.size}, graph width is {self.rows[0].size}")
        self._index[node_id] = len(self.ids)
        self.ids.append(node_id)
        self.modality.append(modality)
        self.rows.append(feature)
        return len(self.ids) - 1

    def add_edge(self, src: Hashable, dst: Hashable, kind: str, weight: float = 1.0) -> None:
        if kind not in EDGE_KINDS:
            raise ValidationError(f"unknown edge kind {kind!r}")
        self.edges.append(Edge(self.index(src), self.index(dst), kind, weight))

    def index(self, node_id: Hashable) -> int:
        try:
            return self._index[node_id]
        except KeyError:
            raise ValidationError(f"unknown node {node_id!r}") from None

    def __contains__(self, node_id) -> bool:
        return node_id in self._index

    @property
    def dim(self) -> int:
        return self.rows[0].size if self.rows else 0

    @property
    def features(self) -> np.ndarray:
        return np.stack(self.rows) if self.rows else np.zeros((0, 0))

    def nodes_of(self, modality: str) -> list[int]:
        return [i for i, m in enumerate(self.modality) if m == modality]

    def in_neighbors(self, q: int) -> list[int]:
        """Sources aggregated into node ``q`` (edges read in both directions), sorted."""
        if self.modality[q] != "text":
            return []
        nb = set()
        for e in self.edges:
            if e.dst == q and e.src != q:
                nb.add(e.src)
            elif e.src == q and e.dst != q:
                nb.add(e.dst)
        return sorted(nb)

    def message_pairs(self, self_loops: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """(source, target) index arrays for every message into a text node.

        Ordered by target, then source.  A text node whose only incoming
        message is its self loop is left out; it is handled like the
        self-loop-only nodes of other modalities.
        """
        nbrs: dict[int, set] = {q: set() for q in self.nodes_of("text")}
        for e in self.edges:
            for s, t in ((e.src, e.dst), (e.dst, e.src)):
                if t in nbrs and s != t:
                    nbrs[t].add(s)
        src, dst = [], []
        for q in sorted(nbrs):
            if not nbrs[q]:
                continue
            for p in sorted(nbrs[q] | ({q} if self_loops else set())):
                src.append(p)
                dst.append(q)
        return np.array(src, dtype=np.intp), np.array(dst, dtype=np.intp)

    def lone_nodes(self, self_loops: bool = True) -> np.ndarray:
        """Nodes updated from their own self loop only."""
        if not self_loops:
            return np.zeros(0, dtype=np.intp)
        _, dst = self.message_pairs(self_loops)
        has = set(dst.tolist())
        return np.array([i for i in range(len(self)) if i not in has], dtype=np.intp)


# ------------------------------------------------------------ construction


def record_document(rec) -> list[list[str]]:
    """A record's sentences (anchor, target) as lists of token surfaces."""
    return [[t.surface for t in content_tokens(tokenize(s))] for s in (rec.anchor, rec.target)]


def graph_structure(records: Sequence, citations: Sequence[tuple[str, str]] = (),
                    width: int = 1, pair_edges: bool = True) -> tuple[HeteroGraph, dict[str, list[str]]]:
    """Nodes and edges for ``records`` with zero features of the given width.

    Each record contributes an anchor and a target text node joined by a
    semantic edge, a hierarchy edge from each text node to the (shared) CPC
    node of its context, and, when it cites other records, one citation node
    with an edge into each of its text nodes.  Also returns, per citing
    record, the ids of the records it cites.  ``pair_edges=False`` leaves
    out the anchor-target edge.
    """
    g = HeteroGraph()
    zero = np.zeros(width)
    for r in records:
        ta, tt = f"{r.id}/anchor", f"{r.id}/target"
        g.add_node(ta, "text", zero)
        g.add_node(tt, "text", zero)
        if pair_edges:
            g.add_edge(ta, tt, "semantic")
        cid = f"cpc:{cpc_parse(r.context).render()}"
        if cid not in g:
            g.add_node(cid, "cpc", zero)
        g.add_edge(ta, cid, "hierarchy")
        g.add_edge(tt, cid, "hierarchy")

    known = {r.id for r in records}
    cited: dict[str, list[str]] = {}
    for citing, target in citations:
        if citing not in known or target not in known:
            warnings.warn(f"citation {citing} -> {target} refers to an unknown record; skipped",
                          DegenerateInputWarning, stacklevel=2)
            continue
        cited.setdefault(citing, []).append(target)
    for r in records:
        if r.id in cited:
            nid = f"cite:{r.id}"
            g.add_node(nid, "cite", zero)
            for side in ("anchor", "target"):
                g.add_edge(nid, f"{r.id}/{side}", "citation")
    return g, cited


def build_graph(
    records: Sequence,
    text_table: EmbeddingTable,
    cpc: CpcEmbedder,
    citations: Sequence[tuple[str, str]] = (),
    tfidf: TfIdfModel | None = None,
) -> HeteroGraph:
    """One graph over a list of phrase-pair records, with initial features.

    Text nodes get the mean of their token embeddings, CPC nodes the
    concatenated level embeddings, citation nodes the TF-IDF-weighted sum of
    the cited records' document embeddings.
    """
    if not records:
        return HeteroGraph()
    g, cited = graph_structure(records, citations, text_table.dim)
    docs = {r.id: record_document(r) for r in records}
    for r in records:
        for side, sent in zip(("anchor", "target"), docs[r.id]):
            g.rows[g.index(f"{r.id}/{side}")] = embed_text_node(sent or [""], text_table)
        code = cpc_parse(r.context)
        g.rows[g.index(f"cpc:{code.render()}")] = cpc_embed(code, cpc)
    if cited:
        ids = [r.id for r in records]
        tfidf = tfidf or tfidf_fit([[t for s in docs[i] for t in s] for i in ids], ids)
        for citing, targets in cited.items():
            members = [(p, np.mean([embed_text_node(s or [""], text_table) for s in docs[p]], axis=0))
                       for p in targets]
            g.rows[g.index(f"cite:{citing}")] = cite_init(citing, members, tfidf, text_table.dim)
    return g


# --------------------------------------------------------------- parameters


@dataclass
class GatLayerParams:
    """One layer's parameters; array fields may also hold tape ``Var`` objects.

    ``W[m]`` is d x d; head t uses rows ``t*d/T:(t+1)*d/T``.  ``a[(m1, m2)]``
    is 1 x 2d; head t uses the matching slices of both halves.
    ``gamma_raw[m]`` is 1 x T and the gate is ``softplus(gamma_raw)``.
    """

    W: dict
    a: dict
    gamma_raw: dict
    heads: int = 1
    modalities: tuple[str, ...] = MODALITIES
    slope: float = LEAKY_SLOPE
    project: bool = True
    neighbor_softmax: bool = False

    def __post_init__(self):
        d = self.dim
        if self.heads < 1 or d % self.heads:
            raise DimensionError(f"{self.heads} heads do not divide width {d}")
        for m in self.modalities:
            if lift(self.W[m]).shape != (d, d):
                raise DimensionError(f"W[{m}] must be {d}x{d}")
            if lift(self.gamma_raw[m]).shape != (1, self.heads):
                raise DimensionError(f"gamma_raw[{m}] must be 1x{self.heads}")
            for m2 in self.modalities:
                if lift(self.a[(m, m2)]).shape != (1, 2 * d):
                    raise DimensionError(f"a[{m},{m2}] must be 1x{2 * d}")

    @property
    def dim(self) -> int:
        return lift(self.W[self.modalities[0]]).shape[0]

    @classmethod
    def init(cls, dim: int, rng: Rng, heads: int = 1, modalities: Sequence[str] = MODALITIES,
             scale: float | None = None, **kw) -> "GatLayerParams":
        scale = (1.0 / np.sqrt(dim)) if scale is None else scale
        W = {m: np.eye(dim) + rng.uniform(-scale, scale, (dim, dim)) * 0.5 for m in modalities}
        a = {(m1, m2): rng.uniform(-scale, scale, (1, 2 * dim)) for m1 in modalities for m2 in modalities}
        gamma = {m: np.full((1, heads), GAMMA_INIT) for m in modalities}
        return cls(W, a, gamma, heads, tuple(modalities), **kw)

    def named_arrays(self) -> list[tuple[str, object]]:
        out = [(f"W.{m}", self.W[m]) for m in self.modalities]
        out += [(f"a.{m1}.{m2}", self.a[(m1, m2)]) for m1 in self.modalities for m2 in self.modalities]
        out += [(f"gamma.{m}", self.gamma_raw[m]) for m in self.modalities]
        return out

    def with_arrays(self, lookup: Callable[[str, object], object]) -> "GatLayerParams":
        """Copy with every array replaced by ``lookup(name, array)``."""
        return replace(
            self,
            W={m: lookup(f"W.{m}", self.W[m]) for m in self.modalities},
            a={(m1, m2): lookup(f"a.{m1}.{m2}", self.a[(m1, m2)])
               for m1 in self.modalities for m2 in self.modalities},
            gamma_raw={m: lookup(f"gamma.{m}", self.gamma_raw[m]) for m in self.modalities},
        )


# ------------------------------------------------------------------ forward


def modal_attention(h_p, h_q, m1: str, m2: str, params: GatLayerParams, head: int = 0) -> Var:
    """Cross-modal coefficient for one node pair and one head (1x1)."""
    for m in (m1, m2):
        if m not in params.modalities:
            raise ValidationError(f"unknown modality {m!r}")
    h_p, h_q = lift(h_p), lift(h_q)
    scores = _channel_scores(h_p, h_q, m1, params, head)
    alpha = ad.softmax_rows(scores)
    k = params.modalities.index(m2)
    return ad.take_cols(alpha, k, k + 1)


def _head_slice(params: GatLayerParams, head: int) -> tuple[int, int]:
    dh = params.dim // params.heads
    return head * dh, (head + 1) * dh


def _split_a(params: GatLayerParams, m1: str, m2: str, head: int) -> tuple[Var, Var]:
    d = params.dim
    s, e = _head_slice(params, head)
    a = lift(params.a[(m1, m2)])
    return ad.take_cols(a, s, e), ad.take_cols(a, d + s, d + e)


def _channel_scores(src_rows: Var, dst_rows: Var, m1: str, params: GatLayerParams, head: int) -> Var:
    """(E x M) pre-softmax scores for source modality m1 across target channels."""
    s, e = _head_slice(params, head)

    def proj(m, rows):
        return ad.matmul(rows, ad.transpose(ad.take_rows(lift(params.W[m]), np.arange(s, e))))

    left_p = proj(m1, src_rows)
    cols = []
    for m2 in params.modalities:
        aL, aR = _split_a(params, m1, m2, head)
        right_q = proj(m2, dst_rows)
        raw = ad.add(ad.matmul(left_p, ad.transpose(aL)), ad.matmul(right_q, ad.transpose(aR)))
        cols.append(ad.leaky_relu(raw, params.slope))
    return ad.concat(cols, axis=1)


def layer_forward(g: HeteroGraph, params: GatLayerParams, features=None, self_loops: bool = True) -> Var:
    """Updated features for every node of ``g`` (N x d)."""
    H = lift(g.features if features is None else features)
    n = H.shape[0]
    if n == 0:
        return H
    d = params.dim
    if H.shape[1] != d:
        raise DimensionError(f"features have width {H.shape[1]}, layer expects {d}")
    for m in set(g.modality):
        if m not in params.modalities:
            raise ValidationError(f"graph modality {m!r} has no parameters")
    src, dst = g.message_pairs(self_loops)
    lone = g.lone_nodes(self_loops)
    mod = np.array(g.modality)
    text_k = params.modalities.index("text") if "text" in params.modalities else None
    heads = []
    for t in range(params.heads):
        s, e = _head_slice(params, t)
        rows_t = np.arange(s, e)
        proj = {m: ad.matmul(H, ad.transpose(ad.take_rows(lift(params.W[m]), rows_t))) for m in params.modalities}
        gate = {m: ad.softplus(ad.take_cols(lift(params.gamma_raw[m]), t, t + 1)) for m in params.modalities}
        out = Var(np.zeros((n, e - s)))
        for m1 in params.modalities:
            sel = np.flatnonzero(mod[src] == m1) if src.size else np.zeros(0, dtype=np.intp)
            if sel.size:
                p_idx, q_idx = src[sel], dst[sel]
                cols = []
                for m2 in params.modalities:
                    aL, aR = _split_a(params, m1, m2, t)
                    raw = ad.add(ad.matmul(ad.take_rows(proj[m1], p_idx), ad.transpose(aL)),
                                 ad.matmul(ad.take_rows(proj[m2], q_idx), ad.transpose(aR)))
                    cols.append(ad.leaky_relu(raw, params.slope))
                scores = ad.concat(cols, axis=1)
                alpha = ad.take_cols(ad.softmax_rows(scores), text_k, text_k + 1)
                if params.neighbor_softmax:
                    alpha = ad.mul(alpha, ad.segment_softmax(ad.take_cols(scores, text_k, text_k + 1), q_idx, n))
                values = ad.take_rows(proj[m1] if params.project else ad.take_cols(H, s, e), p_idx)
                msg = ad.mul(ad.mul(values, alpha), gate[m1])
                out = ad.add(out, ad.scatter_add_rows(msg, q_idx, n))
            lone_m = lone[mod[lone] == m1] if lone.size else lone
            if lone_m.size:
                values = ad.take_rows(proj[m1] if params.project else ad.take_cols(H, s, e), lone_m)
                out = ad.add(out, ad.scatter_add_rows(ad.mul(values, gate[m1]), lone_m, n))
        heads.append(out)
    merged = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
    return ad.elu(merged)


def stack_forward(g: HeteroGraph, layers: Sequence[GatLayerParams], features=None, self_loops: bool = True) -> Var:
    if not layers:
        raise ValidationError("need at least one layer")
    H = lift(g.features if features is None else features)
    for k, params in enumerate(layers):
        if H.shape[0] and params.dim != H.shape[1]:
            raise DimensionError(f"layer {k} expects width {params.dim}, got {H.shape[1]}")
        H = layer_forward(g, params, H, self_loops)
    return H


# ----------------------------------------------------------------- export


def write_graph(g: HeteroGraph, prefix: str | Path, features=None) -> tuple[Path, Path]:
    """Write ``<prefix>.nodes.tsv`` and ``<prefix>.edges.tsv``."""
    prefix = Path(prefix)
    feats = g.features if features is None else lift(features).value
    nodes = prefix.with_name(prefix.name + ".nodes.tsv")
    edges = prefix.with_name(prefix.name + ".edges.tsv")
    with open(nodes, "w", encoding="utf-8") as f:
        for i, nid in enumerate(g.ids):
            f.write("\t".join([str(nid), g.modality[i]] + [format(x, ".17g") for x in feats[i]]) + "\n")
    with open(edges, "w", encoding="utf-8") as f:
        for e in g.edges:
            f.write(f"{g.ids[e.src]}\t{g.ids[e.dst]}\t{e.kind}\n")
    return nodes, edges


def read_graph(prefix: str | Path) -> HeteroGraph:
    prefix = Path(prefix)
    g = HeteroGraph()
    for line in prefix.with_name(prefix.name + ".nodes.tsv").read_text(encoding="utf-8").splitlines():
        nid, modality, *vals = line.split("\t")
        g.add_node(nid, modality, [float(v) for v in vals])
    for line in prefix.with_name(prefix.name + ".edges.tsv").read_text(encoding="utf-8").splitlines():
        src, dst, kind = line.split("\t")
        g.add_edge(src, dst, kind)
    return g
