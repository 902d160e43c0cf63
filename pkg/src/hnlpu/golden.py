"""Single-device reference transformer (RMSNorm, GQA, top-k SwiGLU MoE, sampling).

This is the correctness oracle for the distributed dataflow.  Hardwired
matmuls quantize their input activations to ``act_bits`` with power-of-two
scales, so the float path here and the integer Metal-Embedding path agree
exactly; everything else is float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .mecore import HNArray
from .numerics import FP4_FLOAT, quantize_pow2

WEIGHT_FILE_FORMAT = "hnlpu-weights/1"


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 16
    layers: int = 2
    q_heads: int = 8
    kv_heads: int = 4
    head_dim: int = 4
    experts: int = 16
    top_k: int = 2
    expert_inner: int = 16
    vocab: int = 64
    grid_rows: int = 4
    grid_cols: int = 4
    act_bits: int = 8
    rotary: bool = True
    rope_base: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        if min(self.hidden, self.q_heads, self.kv_heads, self.head_dim, self.experts,
               self.top_k, self.expert_inner, self.vocab, self.grid_rows, self.grid_cols) < 1:
            raise ValueError("model dimensions must be positive")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.top_k > self.experts:
            raise ValueError("top_k exceeds expert count")
        if self.q_heads % self.kv_heads:
            raise ValueError("q_heads must be a multiple of kv_heads")
        if self.rotary and self.head_dim % 2:
            raise ValueError("rotary embedding needs an even head_dim")
        if self.act_bits < 2:
            raise ValueError("act_bits must be >= 2")

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        base = dict(hidden=2880, layers=36, q_heads=64, kv_heads=8, head_dim=64, experts=128,
                    top_k=4, expert_inner=2880, vocab=201088)
        base.update(kw)
        return cls(**base)

    @property
    def group(self) -> int:
        return self.q_heads // self.kv_heads

    @property
    def q_width(self) -> int:
        return self.q_heads * self.head_dim

    @property
    def kv_width(self) -> int:
        return self.kv_heads * self.head_dim

    def check_grid(self):
        """Divisibility required to map the model onto the chip grid."""
        r, c = self.grid_rows, self.grid_cols
        problems = []
        if self.hidden % r or self.hidden % c:
            problems.append("hidden not divisible by grid rows/cols")
        if self.q_heads % c or self.kv_heads % c:
            problems.append("head counts not divisible by grid_cols")
        if self.experts % (r * c):
            problems.append("experts not divisible by chip count")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass(frozen=True)
class QuantTensor:
    """FP4 code array with a per-tensor (power-of-two) scale."""
    codes: np.ndarray
    scale: float

    def dequantized(self) -> np.ndarray:
        return FP4_FLOAT[self.codes.astype(np.intp)] * self.scale

    def __getitem__(self, idx) -> "QuantTensor":
        return QuantTensor(self.codes[idx], self.scale)

    @property
    def shape(self):
        return self.codes.shape


@dataclass
class BlockWeights:
    attn_gain: np.ndarray
    wq: QuantTensor
    wk: QuantTensor
    wv: QuantTensor
    wo: QuantTensor
    moe_gain: np.ndarray
    wrout: QuantTensor
    wup: QuantTensor    # (E, H, I)
    wgate: QuantTensor  # (E, H, I)
    wdown: QuantTensor  # (E, I, H)

    TENSORS = ("wq", "wk", "wv", "wo", "wrout", "wup", "wgate", "wdown")
    GAINS = ("attn_gain", "moe_gain")


@dataclass
class ModelWeights:
    cfg: ModelConfig
    embed: QuantTensor    # (V, H), fetched from HBM
    blocks: list
    final_gain: np.ndarray
    unembed: QuantTensor  # (H, V)


def _random_tensor(rng, shape, fan_in) -> QuantTensor:
    codes = rng.integers(0, 16, size=shape, dtype=np.uint8)
    # E2M1 values have rms ~2.9; aim for roughly unit-variance outputs
    scale = 2.0 ** -math.ceil(math.log2(2.9 * math.sqrt(fan_in)))
    return QuantTensor(codes, scale)


def random_weights(cfg: ModelConfig, seed: int = 0) -> ModelWeights:
    """Deterministic pseudo-random weights keyed by seed."""
    rng = np.random.default_rng(seed)
    H, E, I = cfg.hidden, cfg.experts, cfg.expert_inner
    blocks = []
    for _ in range(cfg.layers):
        blocks.append(BlockWeights(
            attn_gain=1.0 + 0.1 * rng.standard_normal(H),
            wq=_random_tensor(rng, (H, cfg.q_width), H),
            wk=_random_tensor(rng, (H, cfg.kv_width), H),
            wv=_random_tensor(rng, (H, cfg.kv_width), H),
            wo=_random_tensor(rng, (cfg.q_width, H), cfg.q_width),
            moe_gain=1.0 + 0.1 * rng.standard_normal(H),
            wrout=_random_tensor(rng, (H, E), H),
            wup=_random_tensor(rng, (E, H, I), H),
            wgate=_random_tensor(rng, (E, H, I), H),
            wdown=_random_tensor(rng, (E, I, H), I),
        ))
    embed = QuantTensor(rng.integers(0, 16, size=(cfg.vocab, H), dtype=np.uint8), 0.5)
    return ModelWeights(cfg, embed, blocks, 1.0 + 0.1 * rng.standard_normal(H),
                        _random_tensor(rng, (H, cfg.vocab), H))


# ---------------------------------------------------------------------------
# Weight files: an .npz container of FP4 code arrays, scales and norm gains

def save_weights(path, model: ModelWeights) -> None:
    arrays = {
        "format": np.array(WEIGHT_FILE_FORMAT),
        "config": np.array(json.dumps(asdict(model.cfg), sort_keys=True)),
        "embed.codes": model.embed.codes, "embed.scale": np.array(model.embed.scale),
        "unembed.codes": model.unembed.codes, "unembed.scale": np.array(model.unembed.scale),
        "final_gain": model.final_gain,
    }
    for i, b in enumerate(model.blocks):
        for name in BlockWeights.TENSORS:
            t = getattr(b, name)
            arrays[f"layers.{i}.{name}.codes"] = t.codes
            arrays[f"layers.{i}.{name}.scale"] = np.array(t.scale)
        for name in BlockWeights.GAINS:
            arrays[f"layers.{i}.{name}"] = getattr(b, name)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_weights(path) -> ModelWeights:
    with np.load(Path(path), allow_pickle=False) as z:
        if str(z["format"]) != WEIGHT_FILE_FORMAT:
            raise ValueError(f"not a {WEIGHT_FILE_FORMAT} file")
        cfg = ModelConfig(**json.loads(str(z["config"])))

        def qt(prefix):
            return QuantTensor(z[f"{prefix}.codes"], float(z[f"{prefix}.scale"]))

        blocks = []
        for i in range(cfg.layers):
            kw = {n: qt(f"layers.{i}.{n}") for n in BlockWeights.TENSORS}
            kw.update({n: z[f"layers.{i}.{n}"] for n in BlockWeights.GAINS})
            blocks.append(BlockWeights(**kw))
        return ModelWeights(cfg, qt("embed"), blocks, z["final_gain"], qt("unembed"))


# ---------------------------------------------------------------------------
# Building blocks

def rmsnorm(x, gain, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if x.shape != gain.shape:
        raise ValueError(f"rmsnorm length mismatch {x.shape} vs {gain.shape}")
    if not eps > 0:
        raise ValueError("eps must be > 0")
    return x * gain / np.sqrt(np.mean(x * x) + eps)


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def silu(x):
    return x / (1.0 + np.exp(-x))


def swiglu(gate, up):
    return silu(gate) * up


def rotary(x, position: int, base: float = 10000.0) -> np.ndarray:
    """Rotate (..., head_dim) vectors by position; half-split pairing."""
    d = x.shape[-1]
    half = d // 2
    freqs = base ** (-np.arange(half) * 2.0 / d)
    ang = position * freqs
    cos, sin = np.cos(ang), np.sin(ang)
    a, b = x[..., :half], x[..., half:]
    return np.concatenate([a * cos - b * sin, a * sin + b * cos], axis=-1)


def quantized_input(x, bits: int, group: int | None = None):
    """Quantize an activation vector; per-group scales when ``group`` is set."""
    x = np.asarray(x, dtype=np.float64)
    if group is None:
        return [quantize_pow2(x, bits)]
    return [quantize_pow2(x[i:i + group], bits) for i in range(0, len(x), group)]


def linear(x, w: QuantTensor, bits: int, group: int | None = None, engine: str = "float") -> np.ndarray:
    """x @ W with quantized activations.

    ``engine="float"`` multiplies the dequantized operands in float64;
    ``engine="me"`` runs the integer hardwired-neuron path.  With
    power-of-two scales the two are bit-identical.
    """
    parts = quantized_input(x, bits, group)
    step = group or len(x)
    out = np.zeros(w.shape[1])
    for i, q in enumerate(parts):
        rows = w[i * step:(i + 1) * step]
        if engine == "float":
            out = out + q.dequantize() @ rows.dequantized()
        elif engine == "me":
            out = out + HNArray(rows.codes, rows.scale).eval(q)
        else:
            raise ValueError(f"unknown engine {engine!r}")
    return out


class KVCache(NamedTuple):
    k: np.ndarray  # (kv_heads, positions, head_dim)
    v: np.ndarray

    @classmethod
    def empty(cls, cfg: ModelConfig) -> "KVCache":
        z = np.zeros((cfg.kv_heads, 0, cfg.head_dim))
        return cls(z, z.copy())

    def __len__(self):
        return self.k.shape[1]

    def append(self, k, v) -> "KVCache":
        return KVCache(np.concatenate([self.k, k[:, None, :]], axis=1),
                       np.concatenate([self.v, v[:, None, :]], axis=1))


def empty_caches(cfg: ModelConfig) -> list:
    return [KVCache.empty(cfg) for _ in range(cfg.layers)]


@dataclass
class TokenState:
    """Named intermediates of one block for one token."""
    X: np.ndarray
    position: int
    X_norm_attn: np.ndarray | None = None
    Q: np.ndarray | None = None
    K: np.ndarray | None = None
    V: np.ndarray | None = None
    O: np.ndarray | None = None
    X_o: np.ndarray | None = None
    X_norm: np.ndarray | None = None
    X_rout: np.ndarray | None = None
    selected: np.ndarray | None = None
    expert_weights: np.ndarray | None = None
    X_down: np.ndarray | None = None
    Y: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def qkv_projection(cfg: ModelConfig, st: TokenState, w: BlockWeights, engine="float"):
    st.X_norm_attn = rmsnorm(st.X, w.attn_gain, cfg.norm_eps)
    q = linear(st.X_norm_attn, w.wq, cfg.act_bits, engine=engine).reshape(cfg.q_heads, cfg.head_dim)
    k = linear(st.X_norm_attn, w.wk, cfg.act_bits, engine=engine).reshape(cfg.kv_heads, cfg.head_dim)
    v = linear(st.X_norm_attn, w.wv, cfg.act_bits, engine=engine).reshape(cfg.kv_heads, cfg.head_dim)
    if cfg.rotary:
        q = rotary(q, st.position, cfg.rope_base)
        k = rotary(k, st.position, cfg.rope_base)
    st.Q, st.K, st.V = q, k, v
    return q, k, v


def attention(cfg: ModelConfig, q, cache: KVCache) -> np.ndarray:
    """Grouped-query softmax attention of one token over the whole cache; returns (q_heads, head_dim)."""
    qg = q.reshape(cfg.kv_heads, cfg.group, cfg.head_dim)
    logits = np.einsum("kgd,knd->kgn", qg, cache.k) / math.sqrt(cfg.head_dim)
    p = softmax(logits)
    return np.einsum("kgn,knd->kgd", p, cache.v).reshape(cfg.q_heads, cfg.head_dim)


def gqa_block(cfg: ModelConfig, st: TokenState, w: BlockWeights, cache: KVCache, engine="float"):
    """Attention half of a block; returns (X_o, updated cache)."""
    if len(cache) != st.position:
        raise ValueError(f"cache holds {len(cache)} positions, token is at {st.position}")
    _, k, v = qkv_projection(cfg, st, w, engine)
    cache = cache.append(k, v)
    st.O = attention(cfg, st.Q, cache).reshape(-1)
    st.X_o = st.X + linear(st.O, w.wo, cfg.act_bits, group=cfg.head_dim, engine=engine)
    return st.X_o, cache


def route(logits, top_k: int):
    """Top-k experts (ties to the lower index) and softmax weights over their logits."""
    order = np.argsort(-np.asarray(logits), kind="stable")
    sel = np.sort(order[:top_k])
    return sel, softmax(np.asarray(logits)[sel])


def expert_forward(cfg: ModelConfig, xn, w: BlockWeights, e: int, engine="float") -> np.ndarray:
    up = linear(xn, w.wup[e], cfg.act_bits, engine=engine)
    gate = linear(xn, w.wgate[e], cfg.act_bits, engine=engine)
    return linear(swiglu(gate, up), w.wdown[e], cfg.act_bits, engine=engine)


def moe_block(cfg: ModelConfig, st: TokenState, w: BlockWeights, engine="float") -> np.ndarray:
    st.X_norm = rmsnorm(st.X_o, w.moe_gain, cfg.norm_eps)
    st.X_rout = linear(st.X_norm, w.wrout, cfg.act_bits, engine=engine)
    st.selected, st.expert_weights = route(st.X_rout, cfg.top_k)
    acc = np.zeros(cfg.hidden)
    for e, g in zip(st.selected, st.expert_weights):
        acc = acc + g * expert_forward(cfg, st.X_norm, w, int(e), engine)
    st.X_down = acc
    st.Y = st.X_o + acc
    return st.Y


def embed(model: ModelWeights, token_id: int) -> np.ndarray:
    if not 0 <= token_id < model.cfg.vocab:
        raise ValueError(f"token id {token_id} outside vocabulary of {model.cfg.vocab}")
    return model.embed[token_id].dequantized()


def unembed(model: ModelWeights, y, engine="float") -> np.ndarray:
    cfg = model.cfg
    return linear(rmsnorm(y, model.final_gain, cfg.norm_eps), model.unembed, cfg.act_bits, engine=engine)


def forward_token(model: ModelWeights, token_id: int, kv_caches, engine="float", record=None):
    """One decode step; returns (logits, new caches).  ``record`` collects each block's Y."""
    cfg = model.cfg
    x = embed(model, token_id)
    new = []
    for w, cache in zip(model.blocks, kv_caches):
        st = TokenState(X=x, position=len(cache))
        _, cache = gqa_block(cfg, st, w, cache, engine)
        x = moe_block(cfg, st, w, engine)
        new.append(cache)
        if record is not None:
            record.append(st)
    return unembed(model, x, engine), new


def sample(logits, rng=0, mode: str = "greedy", temperature: float = 1.0, size=None):
    """Greedy argmax (lowest index on ties) or seeded multinomial sampling."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("cannot sample from empty logits")
    if not np.isfinite(z).all():
        raise ValueError("logits must be finite")
    if mode == "greedy":
        return int(np.argmax(z))
    if mode != "multinomial":
        raise ValueError(f"unknown sampling mode {mode!r}")
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    cdf = np.cumsum(softmax(z / temperature))
    u = gen.random(size) * cdf[-1]
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), len(z) - 1)
    return int(idx) if size is None else idx


def generate(model: ModelWeights, prompt, n_new: int, engine="float") -> list:
    """Greedy generation; returns the n_new generated token ids."""
    caches = empty_caches(model.cfg)
    logits = None
    for t in prompt:
        logits, caches = forward_token(model, int(t), caches, engine)
    out = []
    for _ in range(n_new):
        tok = sample(logits)
        out.append(tok)
        logits, caches = forward_token(model, tok, caches, engine)
    return out
