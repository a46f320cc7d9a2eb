"""Toy phrase-similarity model and its training loop.

A pair's score is ``(1 + cos(z_anchor, z_target)) / 2``.  Token embeddings
go through the multi-granularity sparse encoder, are mean-pooled per text,
and the pooled vectors become text-node features of a heterogeneous graph
over the batch (text, CPC and citation nodes).  Training minimizes the
squared error against the labeled score plus a weighted contrastive term.
Each of the three stages can be switched off.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from .. import hcl, mgat, msa
from ..errors import NumericError, ValidationError
from ..features import INIT_SCALE, TfIdfModel, cpc_parse, tfidf_cos, tfidf_fit
from ..numkit import Rng, Tape, Var, ad, grad_of, sgd_step
from ..textseg import (TOKEN_CLASSES, TransitionTable, content_tokens, decompose, segment_by_links, soft_phrase_mixing,
                       token_class, tokenize)
from .checkpoint import Checkpoint
from .dataset import PhrasePairRecord

COMPONENTS = ("hcl", "mgat", "msa")
CPC_LEVELS = ("section", "class", "subclass", "group")
N_CLASSES = len(TOKEN_CLASSES)
LINK_CLIP = 0.02


@dataclass
class TrainConfig:
    components: list[str] = field(default_factory=lambda: list(COMPONENTS))
    dim: int = 16
    heads: int = 2
    layers: int = 1
    lr: float = 0.5
    steps: int = 200
    hcl_weight: float = 0.1
    negatives: str = "queue"
    queue_capacity: int = hcl.QUEUE_CAPACITY
    mask_rate: float = hcl.MASK_RATE
    literal_form: bool = False
    tau_init: float = hcl.TAU_INIT
    prototype_momentum: float = hcl.PROTOTYPE_MOMENTUM
    align_threshold: float = 0.5
    phrase_temperature: float = 0.1
    window: int | None = None
    global_k: int | None = None
    prototypes: int | None = None
    fanout: int = 1
    project: bool = True
    neighbor_softmax: bool = False

    def __post_init__(self):
        self.components = sorted(set(self.components))
        unknown = [c for c in self.components if c not in COMPONENTS]
        if unknown:
            raise ValidationError(f"unknown component(s) {unknown}; choose from {list(COMPONENTS)}")
        if self.dim < 4 or self.dim % 4:
            raise ValidationError("dim must be a positive multiple of 4")
        if self.heads < 1 or self.dim % self.heads:
            raise ValidationError(f"{self.heads} heads do not divide dim {self.dim}")
        if self.layers < 1:
            raise ValidationError("need at least one graph layer")
        if self.lr < 0 or self.steps < 0 or self.hcl_weight < 0:
            raise ValidationError("lr, steps and hcl_weight must be non-negative")
        if self.negatives not in ("queue", "batch"):
            raise ValidationError("negatives must be 'queue' or 'batch'")
        if self.tau_init <= 0 or self.phrase_temperature <= 0:
            raise ValidationError("temperatures must be positive")
        if self.fanout < 1:
            raise ValidationError("fanout must be at least 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ValidationError(f"unknown config key(s): {', '.join(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"bad config: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def active(self, component: str) -> bool:
        return component in self.components

    def msa_config(self) -> msa.MsaConfig:
        return msa.MsaConfig(self.window, self.global_k, self.prototypes, self.fanout)


# ------------------------------------------------------------- parameters


def _logit(p):
    return np.log(p) - np.log1p(-p)


def init_params(config: TrainConfig, n_tokens: int, cpc_sizes: Sequence[int], rng: Rng) -> dict[str, np.ndarray]:
    """Fresh parameters; the draw order is fixed so a seed fixes every value."""
    d = config.dim
    p = {"tok": rng.uniform(-INIT_SCALE, INIT_SCALE, (n_tokens + 1, d))}
    for level, size in zip(CPC_LEVELS, cpc_sizes):
        p[f"cpc.{level}"] = rng.uniform(-INIT_SCALE, INIT_SCALE, (size + 1, d // 4))
    for name, arr in msa.MsaParams.init(d, rng).named_arrays():
        p[f"msa.{name}"] = arr
    p["msa.lam_raw"] = np.array([[math.log(math.expm1(msa.LAMBDA_INIT))]])
    p["msa.tau_log"] = np.array([[math.log(msa.PHRASE_TAU_INIT)]])
    table = TransitionTable.default()
    p["seg.links_logit"] = _logit(np.clip(table.to_matrix(), LINK_CLIP, 1 - LINK_CLIP)).reshape(-1, 1)
    p["seg.theta_logit"] = np.array([[_logit(table.theta_phrase)]])
    for layer in range(config.layers):
        gp = mgat.GatLayerParams.init(d, rng, config.heads)
        for name, arr in gp.named_arrays():
            p[f"gat.{layer}.{name}"] = arr
    p["hcl.weights_raw"] = np.zeros((1, 3))
    p["hcl.tau_log"] = np.array([[math.log(config.tau_init)]])
    for name in ("Wq", "Wk"):
        p[f"hcl.{name}"] = np.eye(d) + rng.uniform(-0.1, 0.1, (d, d))
    return p


def _temperature(log_tau) -> Var:
    """``exp(log_tau)``; an overflow or underflow to 0 counts as divergence."""
    tau = ad.exp(log_tau)
    t = tau.value[0, 0]
    if not (np.isfinite(t) and t > 0):
        raise NumericError(f"temperature left the positive reals ({t})")
    return tau


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class _Text:
    """A tokenized text with its fixed sentence/paragraph structure."""

    text: str
    surfaces: list[str]
    link_idx: np.ndarray
    sentences: list[tuple[int, int]]
    paragraphs: list[tuple[int, int]]


def _prepare(text: str) -> _Text:
    tokens = tokenize(text)
    content = [t for t in tokens if t.kind != "punctuation"]
    if not content:
        raise ValidationError(f"text {text!r} has no word tokens")
    cls = {c: k for k, c in enumerate(TOKEN_CLASSES)}
    links = []
    for a, b in zip(content, content[1:]):
        # a punctuation token in between uses the (class, punctuation) entry
        right = token_class(b) if b.index == a.index + 1 else "punctuation"
        links.append(cls[token_class(a)] * N_CLASSES + cls[right])
    dec = decompose(text)
    return _Text(text, [t.surface for t in content], np.array(links, dtype=np.intp),
                 dec.content_spans("G3"), dec.content_spans("G4"))


def _phrases(item: _Text, links: np.ndarray, theta: float) -> list[tuple[int, int]]:
    """Hard phrase spans: the greedy product rule on each sentence's links.

    This is the zero-temperature limit of the soft mixing used in training.
    """
    out = []
    for s, e in item.sentences:
        scores = links[item.link_idx[s:e - 1]]
        out.extend((s + a, s + b) for a, b in segment_by_links(scores, e - s, theta))
    return out


@dataclass
class TrainState:
    """Non-gradient state carried across steps."""

    queue: hcl.NegativeQueue
    prototypes: hcl.PrototypeSet
    rng: Rng


@dataclass
class Forward:
    """Intermediate results of one batch evaluation."""

    tokens: Var
    token_ids: np.ndarray
    texts: Var
    pred: Var


class SimilarityModel:
    def __init__(self, config: TrainConfig, vocab: Sequence[str], cpc_vocabs: Sequence[Sequence[str]],
                 tfidf: TfIdfModel, params: dict[str, np.ndarray], lexicon: Mapping | None = None):
        self.config = config
        self.vocab = list(vocab)
        self.token_index = {t: k + 1 for k, t in enumerate(self.vocab)}
        self.cpc_vocabs = [list(v) for v in cpc_vocabs]
        self.cpc_index = [{t: k + 1 for k, t in enumerate(v)} for v in self.cpc_vocabs]
        self.tfidf = tfidf
        self.params = params
        self.lexicon = dict(lexicon or {})
        self._texts: dict[str, _Text] = {}
        self._patterns: dict = {}
        self.saved_prototypes: dict | None = None

    # construction -------------------------------------------------------

    @classmethod
    def create(cls, records: Sequence[PhrasePairRecord], config: TrainConfig, seed: int,
               lexicon: Mapping | None = None) -> "SimilarityModel":
        if not records:
            raise ValidationError("training needs at least one record")
        docs = [[t.surface for t in content_tokens(tokenize(x))] for r in records for x in (r.anchor, r.target)]
        vocab = list(dict.fromkeys(t for d in docs for t in d))
        lexicon = dict(lexicon or {})
        # synonyms enter the vocabulary whole so a replacement keeps token positions
        vocab = list(dict.fromkeys(vocab + [s for syns in lexicon.values() for s in syns]))
        codes = [cpc_parse(r.context) for r in records]
        cpc_vocabs = [list(dict.fromkeys(c.levels()[k] for c in codes if c.levels()[k] is not None))
                      for k in range(4)]
        params = init_params(config, len(vocab), [len(v) for v in cpc_vocabs], Rng(seed))
        return cls(config, vocab, cpc_vocabs, tfidf_fit(docs), params, lexicon)

    def to_checkpoint(self, state: TrainState | None = None) -> Checkpoint:
        vocabs = {"tokens": self.vocab}
        for level, v in zip(CPC_LEVELS, self.cpc_vocabs):
            vocabs[f"cpc.{level}"] = v
        tensors = dict(self.params)
        if state is not None and state.prototypes.categories():
            vocabs["state.categories"] = state.prototypes.categories()
            tensors["state.prototypes"] = state.prototypes.matrix()
        elif self.saved_prototypes is not None:
            vocabs["state.categories"] = list(self.saved_prototypes)
            tensors["state.prototypes"] = np.stack(list(self.saved_prototypes.values()))
        return Checkpoint(self.config.to_dict(), tensors, vocabs, dict(self.tfidf.df), self.tfidf.n_docs)

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "SimilarityModel":
        config = TrainConfig.from_dict(ck.config)
        try:
            vocab = ck.vocabs["tokens"]
            cpc_vocabs = [ck.vocabs[f"cpc.{level}"] for level in CPC_LEVELS]
        except KeyError as exc:
            raise ValidationError(f"checkpoint lacks vocabulary {exc}") from None
        expected = init_params(config, len(vocab), [len(v) for v in cpc_vocabs], Rng(0))
        params = {}
        for name, arr in expected.items():
            got = ck.tensors.get(name)
            if got is None:
                raise ValidationError(f"checkpoint does not match its config: missing tensor {name}")
            if got.shape != arr.shape:
                raise ValidationError(f"checkpoint does not match its config: {name} is {got.shape}, "
                                      f"expected {arr.shape}")
            params[name] = got
        model = cls(config, vocab, cpc_vocabs, TfIdfModel(dict(ck.df), ck.n_docs), params)
        cats = ck.vocabs.get("state.categories")
        if cats is not None:
            mu = ck.tensors.get("state.prototypes")
            if mu is None or mu.shape != (len(cats), config.dim):
                raise ValidationError("checkpoint prototype state does not match its categories")
            model.saved_prototypes = dict(zip(cats, mu))
        return model

    # forward ------------------------------------------------------------

    def _text(self, text: str) -> _Text:
        item = self._texts.get(text)
        if item is None:
            item = self._texts[text] = _prepare(text)
        return item

    def _ids(self, surfaces: Sequence[str]) -> np.ndarray:
        return np.array([self.token_index.get(s, 0) for s in surfaces], dtype=np.intp)

    def transition_table(self, P=None) -> TransitionTable:
        """The learned phrase table (current parameters by default)."""
        P = self.params if P is None else P
        links = _sigmoid(ad.lift(P["seg.links_logit"]).value).reshape(N_CLASSES, N_CLASSES)
        theta = float(_sigmoid(ad.lift(P["seg.theta_logit"]).value[0, 0]))
        return TransitionTable.from_matrix(links, min(max(theta, 1e-12), 1 - 1e-12))

    def _msa_params(self, P) -> msa.MsaParams:
        def triple(level):
            return tuple(P[f"msa.{level}.{w}"] for w in ("Wq", "Wk", "Wv"))

        return msa.MsaParams(triple("word"), triple("sentence"), triple("paragraph"), P["msa.W_phrase"],
                             tau=_temperature(P["msa.tau_log"]), lam=ad.softplus(P["msa.lam_raw"]))

    def encode(self, P, items: Sequence[_Text], surfaces: Sequence[Sequence[str]], soft: bool) -> tuple[Var, Var]:
        """Token outputs (N x d) and per-text mean-pooled vectors (T x d)."""
        ids = [self._ids(s) for s in surfaces]
        lengths = [len(i) for i in ids]
        n = sum(lengths)
        H0 = ad.take_rows(P["tok"], np.concatenate(ids))
        bounds = np.cumsum([0] + lengths)
        text_spans = list(zip(bounds[:-1].tolist(), bounds[1:].tolist()))
        if not self.config.active("msa"):
            return H0, msa.pool_mean(H0, text_spans, n)

        links = _sigmoid(ad.lift(P["seg.links_logit"]).value[:, 0])
        theta = float(_sigmoid(ad.lift(P["seg.theta_logit"]).value[0, 0]))
        Hv = H0.value
        cfg = self.config.msa_config()
        structures, patterns = [], []
        for (s, e), item in zip(text_spans, items):
            st = msa.Structure(e - s, _phrases(item, links, theta), item.sentences, item.paragraphs)
            structures.append(st)
            key = (item.text, tuple(st.phrases))
            pats = self._patterns.get(key)
            if pats is None:
                pats = msa.build_patterns(Hv[s:e], st, cfg)
                if msa.patterns_fixed(st, cfg):
                    self._patterns[key] = pats
            patterns.append(pats)
        big = msa.merge_structures(structures)
        merged = msa.LevelPatterns(*(msa.merge_patterns([getattr(p, lvl) for p in patterns], tag)
                                     for lvl, tag in (("word", "G1"), ("phrase", "G2"),
                                                      ("sentence", "G3"), ("paragraph", "G4"))))
        weights = np.concatenate([self.tfidf.token_weights(item.surfaces) for item in items])
        mixing = None
        if soft:
            # links between texts are never read: no sentence spans two texts
            link_idx = np.concatenate([np.append(item.link_idx, 0) for item in items])[:-1]
            mixing = soft_phrase_mixing(P["seg.links_logit"], link_idx,
                                        msa.Structure.seg_ids(big.sentences, n),
                                        P["seg.theta_logit"], self.config.phrase_temperature)
        X, _ = msa.sparse_forward(H0, big, merged, self._msa_params(P), tfidf=weights, phrase_mixing=mixing)
        return X, msa.pool_mean(X, text_spans, n)

    def _cpc_feature(self, P, context: str) -> Var:
        code = cpc_parse(context)
        parts = []
        for k, (level, value) in enumerate(zip(CPC_LEVELS, code.levels())):
            parts.append(ad.take_rows(P[f"cpc.{level}"], [self.cpc_index[k].get(value, 0)]))
        return ad.concat(parts, axis=1)

    def graph_forward(self, P, records: Sequence[PhrasePairRecord], pooled: Var,
                      citations: Sequence[tuple[str, str]] = ()) -> Var:
        """Graph outputs for the text nodes, in (anchor, target) per record order."""
        # no anchor-target edge: messages across the compared pair would pull
        # both representations together and saturate the cosine head
        g, cited = mgat.graph_structure(records, citations, self.config.dim, pair_edges=False)
        text_nodes = [g.index(f"{r.id}/{side}") for r in records for side in ("anchor", "target")]
        rows, where = [pooled], list(text_nodes)
        contexts = {}
        for r in records:
            contexts.setdefault(f"cpc:{cpc_parse(r.context).render()}", r.context)
        for nid, ctx in contexts.items():
            rows.append(self._cpc_feature(P, ctx))
            where.append(g.index(nid))
        if cited:
            pos = {r.id: k for k, r in enumerate(records)}
            docs = [[s for x in (r.anchor, r.target) for s in self._text(x).surfaces] for r in records]
            doc_model = tfidf_fit(docs, [r.id for r in records])
            mix = np.zeros((len(cited), pooled.shape[0]))
            for c, (citing, targets) in enumerate(cited.items()):
                for p in targets:
                    sim = tfidf_cos(doc_model, citing, p)
                    mix[c, 2 * pos[p]] += sim / 2
                    mix[c, 2 * pos[p] + 1] += sim / 2
                where.append(g.index(f"cite:{citing}"))
            rows.append(ad.matmul(mix, pooled))
        F = ad.scatter_add_rows(ad.concat(rows, axis=0), where, len(g))
        mods = mgat.MODALITIES
        layers = [
            mgat.GatLayerParams(
                W={m: P[f"gat.{k}.W.{m}"] for m in mods},
                a={(m1, m2): P[f"gat.{k}.a.{m1}.{m2}"] for m1 in mods for m2 in mods},
                gamma_raw={m: P[f"gat.{k}.gamma.{m}"] for m in mods},
                heads=self.config.heads, project=self.config.project,
                neighbor_softmax=self.config.neighbor_softmax)
            for k in range(self.config.layers)
        ]
        Z = mgat.stack_forward(g, layers, F)
        return ad.take_rows(Z, text_nodes)

    def forward(self, P, records: Sequence[PhrasePairRecord], soft: bool = False,
                citations: Sequence[tuple[str, str]] = ()) -> Forward:
        items = [self._text(x) for r in records for x in (r.anchor, r.target)]
        X, pooled = self.encode(P, items, [it.surfaces for it in items], soft)
        Z = self.graph_forward(P, records, pooled, citations) if self.config.active("mgat") else pooled
        za = ad.take_rows(Z, np.arange(0, Z.shape[0], 2))
        zt = ad.take_rows(Z, np.arange(1, Z.shape[0], 2))
        pred = ad.mul(ad.add(ad.cosine_rows(za, zt), 1.0), 0.5)
        ids = np.concatenate([self._ids(it.surfaces) for it in items])
        return Forward(X, ids, Z, pred)

    # losses -------------------------------------------------------------

    def losses(self, P, records: Sequence[PhrasePairRecord], state: TrainState,
               citations: Sequence[tuple[str, str]] = ()) -> tuple[dict[str, Var], Forward]:
        fw = self.forward(P, records, soft=True, citations=citations)
        y = np.array([[r.score] for r in records])
        mse = ad.mean(ad.square(ad.sub(fw.pred, y)))
        parts = {"mse": mse, "total": mse}
        if self.config.active("hcl"):
            lw = self._word_loss(P, records, fw, state)
            ls = self._sentence_loss(P, records, fw)
            lp = state.prototypes.loss(fw.texts, _text_labels(records))
            total_hcl = hcl.loss_hcl(P["hcl.weights_raw"], lw, ls, lp)
            parts.update(word=lw, sentence=ls, paragraph=lp, hcl=total_hcl,
                         total=ad.add(mse, ad.mul(total_hcl, self.config.hcl_weight)))
        return parts, fw

    def _word_loss(self, P, records, fw: Forward, state: TrainState) -> Var:
        items = [self._text(x) for r in records for x in (r.anchor, r.target)]
        rate = self.config.mask_rate
        augmented = [hcl.augment_mask(it.surfaces, self.lexicon, state.rng, rate) if self.lexicon
                     else list(it.surfaces) for it in items]
        X_pos, _ = self.encode(P, items, augmented, soft=True)
        tau = _temperature(P["hcl.tau_log"])
        ids = fw.token_ids
        if self.config.negatives == "batch":
            return hcl.loss_word_batch(fw.tokens, X_pos, tau, exclude=ids[:, None] == ids[None, :])
        keys = np.array(state.queue.keys(), dtype=np.intp)
        exclude = ids[:, None] == keys[None, :] if keys.size else None
        return hcl.loss_word(fw.tokens, X_pos, state.queue, tau, self.config.literal_form, exclude)

    def _sentence_loss(self, P, records, fw: Forward) -> Var:
        Z = fw.texts
        za = ad.take_rows(Z, np.arange(0, Z.shape[0], 2))
        zt = ad.take_rows(Z, np.arange(1, Z.shape[0], 2))
        attn = hcl.sent_sim_matrix(ad.matmul(za, P["hcl.Wq"]), ad.matmul(zt, P["hcl.Wk"]))
        cand = tuple(range(len(records)))
        pairs = [hcl.AlignmentPair(m, m, int(r.score >= self.config.align_threshold), cand)
                 for m, r in enumerate(records)]
        return hcl.loss_sentence(pairs, attn)

    # state --------------------------------------------------------------

    def initial_state(self, records: Sequence[PhrasePairRecord], seed: int,
                      citations: Sequence[tuple[str, str]] = ()) -> TrainState:
        """Queue and prototypes seeded from the untrained encoder outputs."""
        state = TrainState(hcl.NegativeQueue(self.config.queue_capacity, self.config.dim),
                           hcl.PrototypeSet(self.config.dim, self.config.prototype_momentum),
                           Rng(seed ^ 0x5EED))
        if self.config.active("hcl"):
            fw = self.forward(self.params, records, soft=True, citations=citations)
            self._push(state, fw)
            state.prototypes.ensure(fw.texts, _text_labels(records))
        return state

    def _push(self, state: TrainState, fw: Forward) -> None:
        n = fw.token_ids.size
        pick = np.array(sorted(state.rng.sample(n, min(n, self.config.queue_capacity))), dtype=np.intp)
        state.queue.push(fw.tokens.value[pick], fw.token_ids[pick].tolist())

    def advance(self, state: TrainState, records, fw: Forward) -> None:
        if self.config.active("hcl"):
            self._push(state, fw)
            state.prototypes.update(fw.texts, _text_labels(records))

    # inference ----------------------------------------------------------

    def predict(self, records: Sequence[PhrasePairRecord]) -> np.ndarray:
        """Scores for each record, each evaluated on its own graph."""
        return np.array([self.score(r.anchor, r.target, r.context) for r in records])

    def score(self, anchor: str, target: str, context: str) -> float:
        rec = PhrasePairRecord("query", anchor, target, context, 0.0)
        cpc_parse(context)
        fw = self.forward(self.params, [rec])
        return float(min(1.0, max(0.0, fw.pred.value[0, 0])))


def _text_labels(records) -> list[str]:
    return [cpc_parse(r.context).render() for r in records for _ in (0, 1)]


# --------------------------------------------------------------- training


CURVE_COLUMNS = ("step", "total", "mse", "hcl", "word", "sentence", "paragraph")


@dataclass
class TrainResult:
    model: SimilarityModel
    state: TrainState
    curve: list[dict[str, float]]
    diverged: bool = False
    message: str = ""

    def checkpoint(self) -> Checkpoint:
        return self.model.to_checkpoint(self.state)

    def curve_csv(self) -> str:
        lines = [",".join(CURVE_COLUMNS)]
        for row in self.curve:
            lines.append(",".join([str(row["step"])] + [_fmt(row.get(c)) for c in CURVE_COLUMNS[1:]]))
        return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    return "" if x is None else format(x, ".17g")


def train(records: Sequence[PhrasePairRecord], config: TrainConfig | None = None, seed: int = 0,
          lexicon: Mapping | None = None, citations: Sequence[tuple[str, str]] = ()) -> TrainResult:
    """Full-batch gradient descent; stops early on a non-finite loss or update.

    On divergence the returned model holds the last finite parameters.
    """
    config = config or TrainConfig()
    records = list(records)
    model = SimilarityModel.create(records, config, seed, lexicon)
    state = model.initial_state(records, seed, citations)
    names = list(model.params)
    result = TrainResult(model, state, [])
    for step in range(config.steps):
        tape = Tape()
        P = {k: tape.param(model.params[k], k) for k in names}
        try:
            parts, fw = model.losses(P, records, state, citations)
            ad.check_finite(parts["total"], "total loss")
        except NumericError as exc:
            result.diverged, result.message = True, f"step {step}: {exc}"
            break
        tape.backward(parts["total"])
        new = sgd_step([model.params[k] for k in names], [grad_of(P[k]) for k in names], config.lr)
        if not all(np.all(np.isfinite(a)) for a in new):
            result.diverged, result.message = True, f"step {step}: non-finite parameter update"
            break
        row = {"step": step}
        row.update({k: v.item() for k, v in parts.items()})
        result.curve.append(row)
        model.params = dict(zip(names, new))
        model.advance(state, records, fw)
    return result
