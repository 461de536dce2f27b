"""Toy deterministic autoregressive transformer used as the verification target.

The model is small enough for brute-force oracles (default vocab 64, width 32,
2 layers) but produces nontrivial next-token distributions.  A model instance
is immutable after construction; each decoding session owns its KvCache.

Sequential decoding and batched tree decoding route every token through the
same per-token step function, so any root-to-leaf tree path reproduces the
sequential outputs bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .kernels import attn_row, inverse_cdf_sample, layer_norm, silu, sinusoid_position, softmax

MAGIC_TARGET = b"SDFM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TargetConfig:
    vocab: int = 64
    dim: int = 32
    n_layers: int = 2
    n_heads: int = 2
    eos_id: int | None = None

    def __post_init__(self):
        if self.dim % self.n_heads != 0:
            raise ValueError("dim must be divisible by n_heads")


@dataclass(frozen=True)
class StepOutput:
    """Logits over the vocabulary plus the pre-head hidden state they came from."""

    logits: np.ndarray
    feature: np.ndarray


@dataclass
class LayerParams:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


class KvCache:
    """Append-only per-layer key/value store for one decoding session."""

    def __init__(self, n_layers: int, dim: int, capacity: int = 256):
        self.n_layers = n_layers
        self.dim = dim
        self.length = 0
        self._k = [np.zeros((capacity, dim)) for _ in range(n_layers)]
        self._v = [np.zeros((capacity, dim)) for _ in range(n_layers)]

    def _grow(self, need: int) -> None:
        cap = self._k[0].shape[0]
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        for l in range(self.n_layers):
            for buf_list in (self._k, self._v):
                nb = np.zeros((new_cap, self.dim))
                nb[: self.length] = buf_list[l][: self.length]
                buf_list[l] = nb

    def keys(self, layer: int) -> np.ndarray:
        return self._k[layer][: self.length]

    def values(self, layer: int) -> np.ndarray:
        return self._v[layer][: self.length]

    def append(self, new_k: list[np.ndarray], new_v: list[np.ndarray]) -> None:
        self._grow(self.length + 1)
        for l in range(self.n_layers):
            self._k[l][self.length] = new_k[l]
            self._v[l][self.length] = new_v[l]
        self.length += 1

    def commit_rows(self, kv: "TreeKv", indices: list[int]) -> None:
        """Append the selected tree rows, in order, as if decoded sequentially."""
        self._grow(self.length + len(indices))
        for i in indices:
            for l in range(self.n_layers):
                self._k[l][self.length] = kv.k[l][i]
                self._v[l][self.length] = kv.v[l][i]
            self.length += 1

    def clone(self) -> "KvCache":
        c = KvCache(self.n_layers, self.dim, capacity=max(self.length, 1))
        c._grow(self.length)
        for l in range(self.n_layers):
            c._k[l][: self.length] = self._k[l][: self.length]
            c._v[l][: self.length] = self._v[l][: self.length]
        c.length = self.length
        return c

    def fingerprint(self) -> bytes:
        parts = [struct.pack("<q", self.length)]
        for l in range(self.n_layers):
            parts.append(self.keys(l).tobytes())
            parts.append(self.values(l).tobytes())
        return b"".join(parts)


@dataclass
class TreeKv:
    """Per-layer key/value rows computed for tentatively forwarded tree tokens."""

    k: list[np.ndarray]
    v: list[np.ndarray]


class TargetModel:
    def __init__(self, config: TargetConfig, emb, layers, lnf_g, lnf_b, head):
        self.config = config
        self.emb = emb
        self.layers = layers
        self.lnf_g = lnf_g
        self.lnf_b = lnf_b
        self.head = head

    @property
    def vocab(self) -> int:
        return self.config.vocab

    @property
    def dim(self) -> int:
        return self.config.dim

    def new_cache(self) -> KvCache:
        return KvCache(self.config.n_layers, self.config.dim)

    def _check_token(self, token: int) -> None:
        if not 0 <= token < self.config.vocab:
            raise ValueError(f"token {token} out of vocab range [0, {self.config.vocab})")

    def _heads(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(self.config.n_heads, self.config.dim // self.config.n_heads)

    def _token_step(self, token: int, position: int, ctx_k, ctx_v):
        """Run one token through the stack given per-layer attention contexts.

        ctx_k / ctx_v are per-layer (n, dim) arrays of earlier positions only;
        the token always attends to them plus itself.
        """
        H = self.config.n_heads
        dh = self.config.dim // H
        x = self.emb[token] + sinusoid_position(position, self.config.dim)
        new_k, new_v = [], []
        for l, lp in enumerate(self.layers):
            a_in = layer_norm(x, lp.ln1_g, lp.ln1_b)
            q = lp.wq @ a_in
            k = lp.wk @ a_in
            v = lp.wv @ a_in
            K = np.concatenate((ctx_k[l], k[None, :]), axis=0)
            V = np.concatenate((ctx_v[l], v[None, :]), axis=0)
            qh = self._heads(q)
            out = np.empty(self.config.dim)
            for h in range(H):
                out[h * dh : (h + 1) * dh] = attn_row(
                    qh[h], K[:, h * dh : (h + 1) * dh], V[:, h * dh : (h + 1) * dh]
                )
            x = x + lp.wo @ out
            m_in = layer_norm(x, lp.ln2_g, lp.ln2_b)
            x = x + lp.w2 @ silu(lp.w1 @ m_in)
            new_k.append(k)
            new_v.append(v)
        f = layer_norm(x, self.lnf_g, self.lnf_b)
        logits = self.head @ f
        return StepOutput(logits=logits, feature=f), new_k, new_v

    def forward_cached(self, cache: KvCache, token: int) -> StepOutput:
        """Decode one token at the next position, extending the cache."""
        self._check_token(token)
        ctx_k = [cache.keys(l) for l in range(self.config.n_layers)]
        ctx_v = [cache.values(l) for l in range(self.config.n_layers)]
        out, new_k, new_v = self._token_step(token, cache.length, ctx_k, ctx_v)
        cache.append(new_k, new_v)
        return out

    def prefill(self, cache: KvCache, tokens: list[int]) -> list[StepOutput]:
        return [self.forward_cached(cache, t) for t in tokens]

    def forward_tree_kv(self, cache, tokens, mask, positions):
        """Batched tentative forward over tree tokens; the cache is not mutated.

        mask may be square over (cache length + len(tokens)) or rectangular
        with one row per new token; positions are offsets from the cache end
        (a chain would use 0, 1, 2, ...).  Returns outputs plus the computed
        key/value rows so accepted paths can be committed without recompute.
        """
        m = len(tokens)
        c = cache.length
        L = self.config.n_layers
        if m == 0:
            return [], TreeKv(k=[np.zeros((0, self.dim)) for _ in range(L)],
                              v=[np.zeros((0, self.dim)) for _ in range(L)])
        mask = np.asarray(mask, dtype=bool)
        if mask.shape == (c + m, c + m):
            mask = mask[c:, :]
        if mask.shape != (m, c + m):
            raise ValueError("mask/token length mismatch")
        if len(positions) != m:
            raise ValueError("positions/token length mismatch")
        outputs: list[StepOutput] = []
        kv = TreeKv(
            k=[np.zeros((m, self.dim)) for _ in range(L)],
            v=[np.zeros((m, self.dim)) for _ in range(L)],
        )
        full_prefix_k = [cache.keys(l) for l in range(L)]
        full_prefix_v = [cache.values(l) for l in range(L)]
        for i in range(m):
            self._check_token(tokens[i])
            row = mask[i]
            if not row[c + i]:
                raise ValueError(f"tree token {i} must attend to itself")
            if np.any(row[c + i + 1 :]):
                raise ValueError(f"tree token {i} references a later token")
            anc = np.flatnonzero(row[c : c + i])
            ctx_k, ctx_v = [], []
            all_prefix = bool(row[:c].all())
            pref = np.flatnonzero(row[:c]) if not all_prefix else None
            for l in range(L):
                pk = full_prefix_k[l] if all_prefix else full_prefix_k[l][pref]
                pv = full_prefix_v[l] if all_prefix else full_prefix_v[l][pref]
                if anc.size:
                    ctx_k.append(np.concatenate((pk, kv.k[l][anc]), axis=0))
                    ctx_v.append(np.concatenate((pv, kv.v[l][anc]), axis=0))
                else:
                    ctx_k.append(pk)
                    ctx_v.append(pv)
            out, new_k, new_v = self._token_step(tokens[i], c + int(positions[i]), ctx_k, ctx_v)
            for l in range(L):
                kv.k[l][i] = new_k[l]
                kv.v[l][i] = new_v[l]
            outputs.append(out)
        return outputs, kv

    def forward_tree(self, cache, tokens, mask, positions) -> list[StepOutput]:
        outputs, _ = self.forward_tree_kv(cache, tokens, mask, positions)
        return outputs

    def autoregressive_decode(self, prompt, max_new, temperature=0.0, rng_seed=0):
        """Vanilla decoding baseline; temperature 0 is greedy and rng-independent."""
        if not prompt:
            raise ValueError("prompt must be non-empty")
        if temperature < 0.0:
            raise ValueError("temperature must be >= 0")
        rng = np.random.Generator(np.random.PCG64(rng_seed))
        cache = self.new_cache()
        out = None
        for t in prompt:
            out = self.forward_cached(cache, t)
        emitted: list[int] = []
        for _ in range(max_new):
            if temperature == 0.0:
                nxt = int(np.argmax(out.logits))
            else:
                probs = softmax(out.logits, temperature)
                nxt = inverse_cdf_sample(probs, rng.random())
            emitted.append(nxt)
            if self.config.eos_id is not None and nxt == self.config.eos_id:
                break
            out = self.forward_cached(cache, nxt)
        return emitted


def init_target(config: TargetConfig, seed: int = 0) -> TargetModel:
    """Deterministic parameter initialization from a named seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    d = config.dim
    scale = 1.0 / np.sqrt(d)
    emb = rng.normal(0.0, 1.0, size=(config.vocab, d))
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerParams(
                ln1_g=np.ones(d),
                ln1_b=np.zeros(d),
                wq=rng.normal(0.0, scale, size=(d, d)),
                wk=rng.normal(0.0, scale, size=(d, d)),
                wv=rng.normal(0.0, scale, size=(d, d)),
                wo=rng.normal(0.0, scale, size=(d, d)),
                ln2_g=np.ones(d),
                ln2_b=np.zeros(d),
                w1=rng.normal(0.0, scale, size=(4 * d, d)),
                w2=rng.normal(0.0, 1.0 / np.sqrt(4 * d), size=(d, 4 * d)),
            )
        )
    lnf_g = np.ones(d)
    lnf_b = np.zeros(d)
    head = rng.normal(0.0, scale, size=(config.vocab, d))
    return TargetModel(config, emb, layers, lnf_g, lnf_b, head)


def _target_arrays(model: TargetModel):
    arrs = [model.emb]
    for lp in model.layers:
        arrs += [lp.ln1_g, lp.ln1_b, lp.wq, lp.wk, lp.wv, lp.wo, lp.ln2_g, lp.ln2_b, lp.w1, lp.w2]
    arrs += [model.lnf_g, model.lnf_b, model.head]
    return arrs


def save_target(model: TargetModel, path: str) -> None:
    cfg = model.config
    header = MAGIC_TARGET + struct.pack(
        "<5I", CHECKPOINT_VERSION, cfg.vocab, cfg.dim, cfg.n_layers, cfg.n_heads
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for a in _target_arrays(model):
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_target(path: str) -> TargetModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC_TARGET:
        raise ValueError("bad magic: not a target checkpoint")
    version, vocab, dim, n_layers, n_heads = struct.unpack_from("<5I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg = TargetConfig(vocab=vocab, dim=dim, n_layers=n_layers, n_heads=n_heads)
    model = init_target(cfg, seed=0)
    offset = 4 + 20
    expected = offset + 8 * sum(a.size for a in _target_arrays(model))
    if len(blob) != expected:
        raise ValueError("checkpoint length mismatch")
    for a in _target_arrays(model):
        n = a.size
        vals = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(a.shape)
        a[...] = vals
        offset += 8 * n
    if offset != len(blob):
        raise ValueError("checkpoint length mismatch")
    return model
