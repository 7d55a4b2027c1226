"""Decoder-only transformer family: configs, initialization, forward, decoding.

The architecture is the classic pre-norm causal transformer: learned token and
absolute position embeddings, L blocks of (LN -> multi-head attention ->
residual, LN -> ReLU FFN -> residual), a final LN, and a linear head to vocab
logits. Residual output projections (the attention output matrix and the
second FFN matrix) get the 1/sqrt(2L)-scaled init; all other weights are
N(0, 0.006^2) and all biases start at exactly zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

BASE_INIT_STD = 0.006
EOT_ID = 0  # reserved end-of-text id in locally trained vocabularies
DEFAULT_VOCAB_SIZE = 50257  # GPT-2 byte-level BPE table size


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    vocab_size: int = DEFAULT_VOCAB_SIZE
    max_seq_len: int = 2048
    dropout: float = 0.1  # applied throughout, never on embeddings
    ffn_mult: int = 4
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_seq_len < 1:
            raise ConfigError(f"max_seq_len must be >= 1, got {self.max_seq_len}")
        if self.n_layers < 1 or self.n_heads < 1 or self.d_model < 1:
            raise ConfigError("n_layers, n_heads and d_model must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def parameter_count(self, tie_embeddings: bool | None = None) -> int:
        """Total scalar parameters. Nominal family sizes assume a tied head."""
        tied = self.tie_embeddings if tie_embeddings is None else tie_embeddings
        d, L, v = self.d_model, self.n_layers, self.vocab_size
        per_layer = 12 * d * d + 13 * d  # qkv/out + ffn (with biases) + 2 norms
        total = v * d + self.max_seq_len * d + L * per_layer + 2 * d
        if not tied:
            total += d * v
        return total


@dataclass(frozen=True)
class Preset:
    name: str
    config: ModelConfig
    max_lr: float
    batch_tokens: int
    nominal_params: int


def _preset(name, layers, heads, d, lr, batch, nominal) -> Preset:
    return Preset(
        name=name,
        config=ModelConfig(n_layers=layers, n_heads=heads, d_model=d),
        max_lr=lr,
        batch_tokens=batch,
        nominal_params=nominal,
    )


# The nine-model family: layers, heads, width, peak LR, batch size in tokens.
PRESETS: dict[str, Preset] = {
    p.name: p
    for p in [
        _preset("125M", 12, 12, 768, 6.0e-4, 500_000, 125_000_000),
        _preset("350M", 24, 16, 1024, 3.0e-4, 500_000, 350_000_000),
        _preset("1.3B", 24, 32, 2048, 2.0e-4, 1_000_000, 1_300_000_000),
        _preset("2.7B", 32, 32, 2560, 1.6e-4, 1_000_000, 2_700_000_000),
        _preset("6.7B", 32, 32, 4096, 1.2e-4, 2_000_000, 6_700_000_000),
        _preset("13B", 40, 40, 5120, 1.0e-4, 4_000_000, 13_000_000_000),
        _preset("30B", 48, 56, 7168, 1.0e-4, 4_000_000, 30_000_000_000),
        _preset("66B", 64, 72, 9216, 0.8e-4, 2_000_000, 66_000_000_000),
        _preset("175B", 96, 96, 12288, 1.2e-4, 2_000_000, 175_000_000_000),
    ]
}


def get_preset(name: str) -> Preset:
    try:
        preset = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; known: {sorted(PRESETS)}") from None
    # Reject any row whose head width would be non-integral.
    if preset.config.d_model % preset.config.n_heads != 0:
        raise ConfigError(f"preset {name}: head width is non-integral")
    return preset


@dataclass
class Parameters:
    """Named weight collection. Keys are stable dotted paths."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if v.requires_grad}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy_data(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}


# Parameter name -> is it a residual output projection (scaled init)?
def _is_residual_output(name: str) -> bool:
    return name.endswith("attn.wo") or name.endswith("ffn.w2")


def init_parameters(config: ModelConfig, seed: int, dtype=np.float64) -> Parameters:
    """Sample the full weight set for ``config``, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    d, v, L = config.d_model, config.vocab_size, config.n_layers
    h = config.ffn_mult * d
    out_std = BASE_INIT_STD / np.sqrt(2 * L)

    def w(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    p = Parameters()
    t = p.tensors
    t["embed.tokens"] = w((v, d), BASE_INIT_STD)
    t["embed.pos"] = w((config.max_seq_len, d), BASE_INIT_STD)
    for i in range(L):
        pre = f"layers.{i}"
        t[f"{pre}.attn.norm.gain"] = ones((d,))
        t[f"{pre}.attn.norm.bias"] = zeros((d,))
        t[f"{pre}.attn.wq"] = w((d, d), BASE_INIT_STD)
        t[f"{pre}.attn.wk"] = w((d, d), BASE_INIT_STD)
        t[f"{pre}.attn.wv"] = w((d, d), BASE_INIT_STD)
        t[f"{pre}.attn.wo"] = w((d, d), out_std)
        t[f"{pre}.attn.bq"] = zeros((d,))
        t[f"{pre}.attn.bk"] = zeros((d,))
        t[f"{pre}.attn.bv"] = zeros((d,))
        t[f"{pre}.attn.bo"] = zeros((d,))
        t[f"{pre}.ffn.norm.gain"] = ones((d,))
        t[f"{pre}.ffn.norm.bias"] = zeros((d,))
        t[f"{pre}.ffn.w1"] = w((d, h), BASE_INIT_STD)
        t[f"{pre}.ffn.b1"] = zeros((h,))
        t[f"{pre}.ffn.w2"] = w((h, d), out_std)
        t[f"{pre}.ffn.b2"] = zeros((d,))
    t["final_norm.gain"] = ones((d,))
    t["final_norm.bias"] = zeros((d,))
    if not config.tie_embeddings:
        t["lm_head"] = w((d, v), BASE_INIT_STD)
    return p


def _causal_mask(t: int, dtype) -> Tensor:
    mask = np.triu(np.full((t, t), T.MASK_VALUE, dtype=dtype), k=1)
    return Tensor(mask)


def _dropout_rng(seeds: tuple[int, ...]) -> np.random.Generator:
    return np.random.default_rng(seeds)


def forward_batch(
    params: Parameters,
    config: ModelConfig,
    tokens: np.ndarray,
    *,
    train: bool = False,
    dropout_seed: tuple[int, ...] | None = None,
    capture: dict | None = None,
) -> Tensor:
    """Causal forward over a [B, T] id matrix; returns [B, T, V] logits.

    Dropout is active only when ``train`` is set; its streams derive from
    ``dropout_seed`` extended with (layer index, site index), so runs are
    reproducible across restarts. ``capture``, when given, receives
    ``final_activation`` (the last block's output, pre final norm).
    """
    tok = np.asarray(tokens)
    if tok.ndim != 2:
        raise ShapeError(f"forward_batch: tokens must be [B, T], got {tok.shape}")
    b, t = tok.shape
    if t > config.max_seq_len:
        raise ShapeError(
            f"sequence length {t} exceeds max_seq_len {config.max_seq_len}"
        )
    if tok.size and (tok.min() < 0 or tok.max() >= config.vocab_size):
        raise IndexError(f"token id out of range [0, {config.vocab_size})")

    p = params.tensors
    drop = config.dropout if train else 0.0
    if drop > 0.0 and dropout_seed is None:
        raise ValueError("training forward with dropout requires dropout_seed")

    x = T.add(T.embedding(p["embed.tokens"], tok), T.embedding(p["embed.pos"], np.arange(t)))
    # no dropout on embeddings

    nh, hd = config.n_heads, config.head_dim
    mask = _causal_mask(t, x.dtype)
    scale = 1.0 / np.sqrt(hd)

    for i in range(config.n_layers):
        pre = f"layers.{i}"
        h = T.layer_norm(x, p[f"{pre}.attn.norm.gain"], p[f"{pre}.attn.norm.bias"])
        q = T.add(T.matmul(h, p[f"{pre}.attn.wq"]), p[f"{pre}.attn.bq"])
        k = T.add(T.matmul(h, p[f"{pre}.attn.wk"]), p[f"{pre}.attn.bk"])
        v = T.add(T.matmul(h, p[f"{pre}.attn.wv"]), p[f"{pre}.attn.bv"])
        # [B, T, D] -> [B, H, T, hd]
        q = T.transpose(T.reshape(q, (b, t, nh, hd)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(k, (b, t, nh, hd)), (0, 2, 1, 3))
        v = T.transpose(T.reshape(v, (b, t, nh, hd)), (0, 2, 1, 3))
        scores = T.add(T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale), mask)
        probs = T.softmax(scores, axis=-1)
        if drop > 0.0:
            probs = T.dropout(probs, drop, _dropout_rng((*dropout_seed, i, 0)))
        ctx = T.matmul(probs, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, nh * hd))
        attn_out = T.add(T.matmul(ctx, p[f"{pre}.attn.wo"]), p[f"{pre}.attn.bo"])
        if drop > 0.0:
            attn_out = T.dropout(attn_out, drop, _dropout_rng((*dropout_seed, i, 1)))
        x = T.add(x, attn_out)

        h = T.layer_norm(x, p[f"{pre}.ffn.norm.gain"], p[f"{pre}.ffn.norm.bias"])
        h = T.relu(T.add(T.matmul(h, p[f"{pre}.ffn.w1"]), p[f"{pre}.ffn.b1"]))
        ffn_out = T.add(T.matmul(h, p[f"{pre}.ffn.w2"]), p[f"{pre}.ffn.b2"])
        if drop > 0.0:
            ffn_out = T.dropout(ffn_out, drop, _dropout_rng((*dropout_seed, i, 2)))
        x = T.add(x, ffn_out)

    if capture is not None:
        capture["final_activation"] = x.data
    x = T.layer_norm(x, p["final_norm.gain"], p["final_norm.bias"])
    head = p["embed.tokens"] if config.tie_embeddings else p["lm_head"]
    if config.tie_embeddings:
        logits = T.matmul(x, T.transpose(head, (1, 0)))
    else:
        logits = T.matmul(x, head)
    return logits


def forward(
    params: Parameters,
    config: ModelConfig,
    tokens: Sequence[int],
    *,
    train: bool = False,
    dropout_seed: tuple[int, ...] | None = None,
) -> Tensor:
    """Single-sequence forward: [T] ids -> [T, V] logits."""
    tok = np.asarray(tokens)
    if tok.ndim != 1:
        raise ShapeError(f"forward: tokens must be 1-D, got shape {tok.shape}")
    logits = forward_batch(
        params, config, tok[None, :], train=train, dropout_seed=dropout_seed
    )
    return T.reshape(logits, (tok.shape[0], config.vocab_size))


def next_token_logits(params: Parameters, config: ModelConfig, tokens: Sequence[int]) -> np.ndarray:
    return forward(params, config, tokens).data[-1]


def decode_greedy(
    params: Parameters,
    config: ModelConfig,
    prompt: Sequence[int],
    max_new_tokens: int = 32,
    eot_id: int = EOT_ID,
) -> list[int]:
    """Append the argmax token each step; stop at ``max_new_tokens`` or end-of-text."""
    if len(prompt) == 0:
        raise ValueError("decode_greedy: prompt must be nonempty")
    if len(prompt) > config.max_seq_len:
        raise ShapeError(
            f"prompt length {len(prompt)} exceeds context {config.max_seq_len}"
        )
    seq = list(prompt)
    for _ in range(max_new_tokens):
        window = seq[-config.max_seq_len :]
        nxt = int(np.argmax(next_token_logits(params, config, window)))
        seq.append(nxt)
        if nxt == eot_id:
            break
    return seq


def nucleus_filter(probs: np.ndarray, p: float) -> np.ndarray:
    """Zero out everything outside the smallest mass->=p prefix, renormalize."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"nucleus p must be in (0, 1], got {p}")
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    cutoff = int(np.searchsorted(cum, p)) + 1  # always keeps the top token
    keep = order[:cutoff]
    filtered = np.zeros_like(probs)
    filtered[keep] = probs[keep]
    return filtered / filtered.sum()


def sample_nucleus(
    params: Parameters,
    config: ModelConfig,
    prompt: Sequence[int],
    p: float,
    n_tokens: int,
    seed,
) -> list[int]:
    """Top-p sampling: draw from the renormalized probability-mass->=p prefix.

    Generates exactly ``n_tokens`` (fixed-length protocol); deterministic in
    ``seed``.
    """
    if len(prompt) == 0:
        raise ValueError("sample_nucleus: prompt must be nonempty")
    rng = np.random.default_rng(seed)
    seq = list(prompt)
    for _ in range(n_tokens):
        window = seq[-config.max_seq_len :]
        logits = next_token_logits(params, config, window)
        probs = T.softmax(Tensor(logits), axis=-1).data
        filtered = nucleus_filter(probs, p)
        seq.append(int(rng.choice(len(filtered), p=filtered)))
    return seq
