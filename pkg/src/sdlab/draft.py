"""MoE-routed draft network with decoupled dual expert heads.

One reduction layer over concat(token embedding, previous feature), a single
decoder attention layer, an expert layer with top-k routing, and the target
model's embedding and LM head reused verbatim.  Each step emits two branch
logit vectors (higher-scoring expert on the left) plus the gated mixture
feature that carries the autoregression to the next step.

Parameters live in an ordered dict of float64 arrays so the trainer,
optimizer and checkpoint writer all walk them in one deterministic order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .kernels import attn_row, layer_norm, silu, sinusoid_position, softmax
from .target import KvCache, TargetModel

MAGIC_DRAFT = b"SDFD"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DraftConfig:
    vocab: int = 64
    dim: int = 32
    n_heads: int = 2
    n_experts: int = 2
    active_k: int = 2
    expert_hidden: int = 64
    use_ln: bool = True

    def __post_init__(self):
        if not 1 <= self.active_k <= self.n_experts:
            raise ValueError("need 1 <= active_k <= n_experts")
        if self.dim % self.n_heads != 0:
            raise ValueError("dim must be divisible by n_heads")


@dataclass(frozen=True)
class ExpertScores:
    """Full router softmax plus the selected expert indices, best first."""

    scores: np.ndarray
    top_indices: np.ndarray


@dataclass(frozen=True)
class GateVector:
    gates: np.ndarray


@dataclass(frozen=True)
class ContrastParams:
    beta: float
    alpha: float


@dataclass(frozen=True)
class DraftStepOutput:
    feature_moe: np.ndarray
    feature_top1: np.ndarray
    feature_top2: np.ndarray
    logits_left: np.ndarray
    logits_right: np.ndarray
    scores: ExpertScores

    @property
    def active_k(self) -> int:
        return int(self.scores.top_indices.shape[0])


@dataclass
class DraftState:
    """A drafting session's cache: one attention layer plus the next position index."""

    cache: KvCache
    next_pos: int = 1


def route_experts(u: np.ndarray, centroids: np.ndarray, active_k: int):
    """Softmax router scores over expert centroids and the sparse top-k gates.

    Ties are broken toward the lower expert index so trees are deterministic.
    """
    scores = softmax(centroids @ u)
    order = np.argsort(-scores, kind="stable")
    top = order[:active_k]
    gates = np.zeros_like(scores)
    gates[top] = scores[top]
    return ExpertScores(scores=scores, top_indices=top), GateVector(gates=gates)


class DraftModel:
    def __init__(self, config: DraftConfig, params: dict, emb: np.ndarray, head: np.ndarray):
        self.config = config
        self.params = params
        self.emb = emb
        self.head = head

    @property
    def vocab(self) -> int:
        return self.config.vocab

    @property
    def dim(self) -> int:
        return self.config.dim

    def contrast_params(self) -> ContrastParams:
        return ContrastParams(beta=float(self.params["beta"]), alpha=float(self.params["alpha"]))

    def new_state(self) -> DraftState:
        return DraftState(cache=KvCache(1, self.config.dim), next_pos=1)

    def route(self, v_in: np.ndarray):
        return route_experts(v_in, self.params["router"], self.config.active_k)

    def _expert(self, j: int, x: np.ndarray) -> np.ndarray:
        p = self.params
        return p[f"expert{j}_w2"] @ silu(p[f"expert{j}_w1"] @ x)

    def _step(self, token: int, position: int, prev_feature: np.ndarray, ctx_k, ctx_v):
        cfg = self.config
        p = self.params
        if prev_feature.shape != (cfg.dim,):
            raise ValueError("prev_feature dimension mismatch")
        if not 0 <= token < cfg.vocab:
            raise ValueError(f"token {token} out of vocab range [0, {cfg.vocab})")
        e = self.emb[token] + sinusoid_position(position, cfg.dim)
        x = p["reduction"] @ np.concatenate((e, prev_feature))
        a_in = layer_norm(x, p["ln1_g"], p["ln1_b"]) if cfg.use_ln else x
        q = p["wq"] @ a_in
        k = p["wk"] @ a_in
        v = p["wv"] @ a_in
        K = np.concatenate((ctx_k, k[None, :]), axis=0)
        V = np.concatenate((ctx_v, v[None, :]), axis=0)
        H = cfg.n_heads
        dh = cfg.dim // H
        att = np.empty(cfg.dim)
        for h in range(H):
            att[h * dh : (h + 1) * dh] = attn_row(
                q[h * dh : (h + 1) * dh], K[:, h * dh : (h + 1) * dh], V[:, h * dh : (h + 1) * dh]
            )
        u = x + p["wo"] @ att
        v_in = layer_norm(u, p["ln2_g"], p["ln2_b"]) if cfg.use_ln else u
        scores, gates = self.route(v_in)
        expert_out = {int(j): self._expert(int(j), v_in) for j in scores.top_indices}
        f_moe = u.copy()
        for j in sorted(expert_out):
            f_moe = f_moe + gates.gates[j] * expert_out[j]
        top1 = int(scores.top_indices[0])
        f_top1 = expert_out[top1] + u
        s1 = float(scores.scores[top1])
        if cfg.active_k >= 2:
            top2 = int(scores.top_indices[1])
            f_top2 = expert_out[top2] + u
            s2 = float(scores.scores[top2])
        else:
            f_top2 = f_top1
            s2 = s1
        logits_left = self.head @ (s1 * f_top1)
        logits_right = logits_left if cfg.active_k < 2 else self.head @ (s2 * f_top2)
        out = DraftStepOutput(
            feature_moe=f_moe,
            feature_top1=f_top1,
            feature_top2=f_top2,
            logits_left=logits_left,
            logits_right=logits_right,
            scores=scores,
        )
        return out, k, v

    def forward_cached(self, state: DraftState, token: int, prev_feature: np.ndarray) -> DraftStepOutput:
        """One committed draft step at the session's next position."""
        out, k, v = self._step(token, state.next_pos, prev_feature, state.cache.keys(0), state.cache.values(0))
        state.cache.append([k], [v])
        state.next_pos += 1
        return out

    def contrastive_heads(self, step: DraftStepOutput, cparams: ContrastParams):
        """Mixture logits and contrast logits from the two active expert branches."""
        if step.active_k < 2:
            raise ValueError("contrastive branch requires two active experts")
        s = step.scores.scores
        s1 = float(s[int(step.scores.top_indices[0])])
        s2 = float(s[int(step.scores.top_indices[1])])
        mix = s1 * step.feature_top1 + s2 * step.feature_top2
        const = cparams.beta * step.feature_top1 - cparams.alpha * step.feature_top2
        return self.head @ mix, self.head @ const

    def mixture_logits(self, step: DraftStepOutput, cparams: ContrastParams | None = None) -> np.ndarray:
        """Single-distribution view of a step: branch mixture, or the gated feature when K=1."""
        if step.active_k < 2:
            return self.head @ step.feature_moe
        cp = cparams if cparams is not None else self.contrast_params()
        logits_moe, _ = self.contrastive_heads(step, cp)
        return logits_moe

    def parallel_final_step(self, step: DraftStepOutput, cparams: ContrastParams,
                            depth: int, gamma: int, temperature: float = 1.0):
        """Distributions for the last two tree depths out of one draft pass.

        The mixture head covers depth gamma-1 and the contrast head covers
        depth gamma; no extra draft forward is spent on the final depth.
        """
        if depth != gamma - 1:
            raise ValueError(f"parallel final step invoked at depth {depth}, expected {gamma - 1}")
        logits_moe, logits_const = self.contrastive_heads(step, cparams)
        return softmax(logits_moe, temperature), softmax(logits_const, temperature)


class DraftSession:
    """Per-prompt drafting state: committed rows, a per-round tentative row
    buffer for tree exploration, and the draft forward-pass counter (one count
    per level pass, the unit a batched implementation would execute)."""

    def __init__(self, model: DraftModel):
        self.model = model
        self.state = model.new_state()
        self.passes = 0
        self._tk: list[np.ndarray] = []
        self._tv: list[np.ndarray] = []

    def prefill(self, tokens: list[int], prev_features: list[np.ndarray]) -> None:
        """Ingest committed history rows (positions 1..len); not counted as round passes."""
        for t, f in zip(tokens, prev_features):
            self.model.forward_cached(self.state, t, f)

    def begin_round(self, tokens: list[int], prev_features: list[np.ndarray]) -> DraftStepOutput:
        """First pass of a round: commit the backlog of newly accepted tokens
        and the pending token in one sequential pass; returns the pending
        token's step output, which proposes depth-1 candidates."""
        if not tokens:
            raise ValueError("begin_round needs at least the pending token")
        self.passes += 1
        self._tk.clear()
        self._tv.clear()
        out = None
        for t, f in zip(tokens, prev_features):
            out = self.model.forward_cached(self.state, t, f)
        return out

    def tree_level(self, items: list[tuple[int, np.ndarray, list[int], int]]) -> list[tuple[DraftStepOutput, int]]:
        """One tentative pass over a tree level.

        Each item is (token, prev_feature, ancestor_row_ids, depth); ancestors
        index into this round's tentative rows.  Returns (step output, row id)
        pairs; rows are discarded when the next round begins.
        """
        self.passes += 1
        results = []
        base_k = self.state.cache.keys(0)
        base_v = self.state.cache.values(0)
        for token, prev_feature, anc, depth in items:
            if anc:
                ctx_k = np.concatenate((base_k, np.stack([self._tk[a] for a in anc])), axis=0)
                ctx_v = np.concatenate((base_v, np.stack([self._tv[a] for a in anc])), axis=0)
            else:
                ctx_k, ctx_v = base_k, base_v
            pos = self.state.next_pos - 1 + depth
            out, k, v = self.model._step(token, pos, prev_feature, ctx_k, ctx_v)
            self._tk.append(k)
            self._tv.append(v)
            results.append((out, len(self._tk) - 1))
        return results


def init_draft(config: DraftConfig, target: TargetModel, seed: int = 1) -> DraftModel:
    """Deterministic draft init; embedding and head are shared with the target."""
    if target.vocab != config.vocab or target.dim != config.dim:
        raise ValueError("draft config does not match target vocab/dim")
    rng = np.random.Generator(np.random.PCG64(seed))
    d = config.dim
    p: dict[str, np.ndarray] = {}
    p["reduction"] = rng.normal(0.0, 1.0 / np.sqrt(2 * d), size=(d, 2 * d))
    p["ln1_g"] = np.ones(d)
    p["ln1_b"] = np.zeros(d)
    for name in ("wq", "wk", "wv", "wo"):
        p[name] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
    p["ln2_g"] = np.ones(d)
    p["ln2_b"] = np.zeros(d)
    p["router"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(config.n_experts, d))
    for j in range(config.n_experts):
        p[f"expert{j}_w1"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(config.expert_hidden, d))
        p[f"expert{j}_w2"] = rng.normal(0.0, 1.0 / np.sqrt(config.expert_hidden), size=(d, config.expert_hidden))
    p["beta"] = np.array(1.0)
    p["alpha"] = np.array(0.1)
    return DraftModel(config, p, target.emb, target.head)


def param_order(config: DraftConfig) -> list[str]:
    names = ["reduction", "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "router"]
    for j in range(config.n_experts):
        names += [f"expert{j}_w1", f"expert{j}_w2"]
    names += ["beta", "alpha"]
    return names


def save_draft(model: DraftModel, path: str) -> None:
    cfg = model.config
    header = MAGIC_DRAFT + struct.pack(
        "<8I",
        CHECKPOINT_VERSION,
        cfg.vocab,
        cfg.dim,
        cfg.n_heads,
        cfg.n_experts,
        cfg.active_k,
        cfg.expert_hidden,
        1 if cfg.use_ln else 0,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for name in param_order(cfg):
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def load_draft(path: str, target: TargetModel) -> DraftModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC_DRAFT:
        raise ValueError("bad magic: not a draft checkpoint")
    version, vocab, dim, n_heads, n_exp, k, hid, use_ln = struct.unpack_from("<8I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg = DraftConfig(vocab=vocab, dim=dim, n_heads=n_heads, n_experts=n_exp,
                      active_k=k, expert_hidden=hid, use_ln=bool(use_ln))
    model = init_draft(cfg, target, seed=0)
    offset = 4 + 32
    expected = offset + 8 * sum(model.params[n].size for n in param_order(cfg))
    if len(blob) != expected:
        raise ValueError("checkpoint length mismatch")
    for name in param_order(cfg):
        a = model.params[name]
        n = a.size
        vals = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(a.shape)
        if a.shape == ():
            model.params[name] = np.array(float(vals))
        else:
            a[...] = vals
        offset += 8 * n
    if offset != len(blob):
        raise ValueError("checkpoint length mismatch")
    return model
