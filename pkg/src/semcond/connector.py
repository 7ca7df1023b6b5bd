"""Connector architectures mapping text features to fixed condition tokens.

Four designs: a per-token MLP, a latent-query resampler, and the resampler
with timestep modulation through adaptive layer norm (plain and zero-gated).
The resampler projects the text once, then each block cross-attends latents
onto the projected text and applies a pre-normalized feed-forward, both with
residual connections.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .utils import rng_from, trunc_normal


class UnsupportedVariant(ValueError):
    """Operation not defined for this connector variant."""


class Variant(Enum):
    MLP = "mlp"
    RESAMPLER = "resampler"
    RESAMPLER_ADALN = "resampler_adaln"
    RESAMPLER_ADALN_ZERO = "resampler_adaln_zero"

    @property
    def requires_timestep(self) -> bool:
        return self in (Variant.RESAMPLER_ADALN, Variant.RESAMPLER_ADALN_ZERO)

    @property
    def is_resampler(self) -> bool:
        return self is not Variant.MLP


@dataclass(frozen=True)
class ConnectorConfig:
    d_llm: int = 128
    d: int = 64
    n_latents: int = 16
    blocks: int = 2
    heads: int = 4
    ffn_mult: int = 4
    d_t: int = 64
    max_tokens: int = 48
    timesteps: int = 100

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.n_latents < 1 or self.blocks < 1 or self.max_tokens < 1:
            raise ValueError("n_latents, blocks and max_tokens must be positive")
        if self.d_t % 2 != 0:
            raise ValueError("d_t must be even for the sinusoidal encoding")


# Reference configuration pinned by the reported trainable-parameter counts:
# a 2048-wide text encoder feeding 64 latent queries at width 768.
REFERENCE_CONFIG = ConnectorConfig(
    d_llm=2048, d=768, n_latents=64, blocks=6, heads=12, ffn_mult=4,
    d_t=768, max_tokens=128, timesteps=1000,
)


@dataclass
class TextFeatureSequence:
    features: np.ndarray
    token_labels: list = None

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2:
            raise DimensionError("text features must be [tokens, width]")
        if len(self.features) < 1:
            raise ValueError("empty token sequence")
        if not np.isfinite(self.features).all():
            raise ValueError("text features contain non-finite values")
        if self.token_labels is not None and len(self.token_labels) != len(self.features):
            raise ValueError("token_labels length mismatch")

    def __len__(self):
        return len(self.features)


@dataclass
class Connector:
    config: ConnectorConfig
    variant: Variant
    params: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# parameter allocation and counting
# ---------------------------------------------------------------------------


def init_connector(config: ConnectorConfig, variant: Variant, seed: int = 0,
                   dtype=np.float32) -> Connector:
    rng = rng_from(seed, "connector", variant.value)
    p = {}

    def w(name, shape, std=0.02):
        p[name] = ad.parameter(trunc_normal(rng, shape, std, dtype))

    def zeros(name, shape):
        p[name] = ad.parameter(np.zeros(shape, dtype=dtype))

    def ones(name, shape):
        p[name] = ad.parameter(np.ones(shape, dtype=dtype))

    c = config
    if variant is Variant.MLP:
        w("mlp.fc1.w", (c.d_llm, c.d))
        zeros("mlp.fc1.b", (c.d,))
        w("mlp.fc2.w", (c.d, c.d))
        zeros("mlp.fc2.b", (c.d,))
        return Connector(config, variant, p)

    w("latents", (c.n_latents, c.d))
    w("proj_in.w", (c.d_llm, c.d))
    zeros("proj_in.b", (c.d,))
    for i in range(c.blocks):
        for proj in ("q", "k", "v", "o"):
            w(f"block{i}.attn.{proj}.w", (c.d, c.d))
            zeros(f"block{i}.attn.{proj}.b", (c.d,))
        w(f"block{i}.ffn.fc1.w", (c.d, c.ffn_mult * c.d))
        zeros(f"block{i}.ffn.fc1.b", (c.ffn_mult * c.d,))
        w(f"block{i}.ffn.fc2.w", (c.ffn_mult * c.d, c.d))
        zeros(f"block{i}.ffn.fc2.b", (c.d,))
        if variant is Variant.RESAMPLER:
            ones(f"block{i}.norm1.g", (c.d,))
            zeros(f"block{i}.norm1.b", (c.d,))
            ones(f"block{i}.norm2.g", (c.d,))
            zeros(f"block{i}.norm2.b", (c.d,))
        else:
            # starts out as plain layer norm; zero gates additionally make
            # every block the identity at initialization
            zeros(f"block{i}.adaln.w", (c.d_t, 4 * c.d))
            zeros(f"block{i}.adaln.b", (4 * c.d,))
            if variant is Variant.RESAMPLER_ADALN_ZERO:
                zeros(f"block{i}.gate_attn.w", (c.d_t, c.d))
                zeros(f"block{i}.gate_attn.b", (c.d,))
                zeros(f"block{i}.gate_ffn.w", (c.d_t, c.d))
                zeros(f"block{i}.gate_ffn.b", (c.d,))
    ones("final_norm.g", (c.d,))
    zeros("final_norm.b", (c.d,))
    if variant.requires_timestep:
        w("temb.fc1.w", (c.d_t, c.d_t))
        zeros("temb.fc1.b", (c.d_t,))
        w("temb.fc2.w", (c.d_t, c.d_t))
        zeros("temb.fc2.b", (c.d_t,))
    return Connector(config, variant, p)


def count_parameters(config: ConnectorConfig, variant: Variant) -> int:
    """Closed-form trainable scalar count for a variant under this layout."""
    c = config
    lin = lambda din, dout: din * dout + dout
    if variant is Variant.MLP:
        return lin(c.d_llm, c.d) + lin(c.d, c.d)
    block = 4 * lin(c.d, c.d) + lin(c.d, c.ffn_mult * c.d) + lin(c.ffn_mult * c.d, c.d)
    if variant is Variant.RESAMPLER:
        block += 2 * 2 * c.d
    else:
        block += lin(c.d_t, 4 * c.d)
        if variant is Variant.RESAMPLER_ADALN_ZERO:
            block += 2 * lin(c.d_t, c.d)
    total = c.n_latents * c.d + lin(c.d_llm, c.d) + c.blocks * block + 2 * c.d
    if variant.requires_timestep:
        total += 2 * lin(c.d_t, c.d_t)
    return total


def n_allocated(conn: Connector) -> int:
    return sum(int(t.data.size) for t in conn.params.values())


# ---------------------------------------------------------------------------
# timestep embedding
# ---------------------------------------------------------------------------


def embed_timestep(conn: Connector, t: int) -> Tensor:
    """Sinusoid of width d_t pushed through the learned two-layer SiLU MLP."""
    return embed_timesteps(conn, np.asarray([int(t)]))


def embed_timesteps(conn: Connector, ts: np.ndarray) -> Tensor:
    c = conn.config
    ts = np.asarray(ts)
    if ((ts < 0) | (ts >= c.timesteps)).any():
        raise ValueError(f"timestep out of range [0, {c.timesteps})")
    p = conn.params
    enc = ad.sinusoidal_encoding(ts, c.d_t).astype(p["temb.fc1.w"].dtype)
    h = ad.linear(ad.constant(enc), p["temb.fc1.w"], p["temb.fc1.b"])
    return ad.linear(ad.silu(h), p["temb.fc2.w"], p["temb.fc2.b"])


def adaln_modulate(h, t_emb, weight: Tensor, bias: Tensor = None):
    """(1 + dgamma) * layer_norm(h) + beta with (dgamma, beta) from a d_t -> 2d map."""
    d = h.shape[-1]
    if weight.shape[-1] != 2 * d:
        raise DimensionError(f"modulation map must emit 2*{d} values, got {weight.shape[-1]}")
    mod = ad.linear(t_emb, weight, bias)
    dgamma = ad.narrow(mod, -1, 0, d)
    beta = ad.narrow(mod, -1, d, d)
    return _apply_mod(h, dgamma, beta)


def _apply_mod(h, dgamma, beta):
    # modulation comes in per sample [B, d]; h is [B, n, d]
    b, d = dgamma.shape
    dgamma = ad.reshape(dgamma, (b, 1, d))
    beta = ad.reshape(beta, (b, 1, d))
    normed = ad.layer_norm(h)
    return ad.add(ad.mul(normed, ad.add(dgamma, ad.constant(np.ones(1, dtype=h.dtype)))), beta)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _heads_split(x, heads: int):
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _heads_join(x):
    b, h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def forward_batch(conn: Connector, feats: np.ndarray, ts=None, capture=None) -> Tensor:
    """Batched forward over [B, L, d_llm]; returns [B, M, d].

    ts is a length-B integer array for the timestep-aware variants and must
    be omitted otherwise. capture, when a list, receives the cross-attention
    weights [B, heads, N, L] of every block in order.
    """
    c, p, variant = conn.config, conn.params, conn.variant
    feats = np.asarray(feats)
    if feats.ndim != 3:
        raise DimensionError("forward_batch expects [batch, tokens, width]")
    bsz, length, width = feats.shape
    if width != c.d_llm:
        raise DimensionError(f"feature width {width} != configured d_llm {c.d_llm}")
    if length > c.max_tokens:
        raise ValueError(f"{length} tokens exceed max_tokens={c.max_tokens}; truncate explicitly")
    if variant.requires_timestep:
        if ts is None:
            raise ValueError(f"variant {variant.value} requires a timestep")
        ts = np.asarray(ts)
        if ts.shape != (bsz,):
            raise DimensionError("ts must hold one timestep per batch row")
    x_in = ad.constant(feats.astype(p_dtype(conn)))

    if variant is Variant.MLP:
        h = ad.linear(x_in, p["mlp.fc1.w"], p["mlp.fc1.b"])
        return ad.linear(ad.gelu(h), p["mlp.fc2.w"], p["mlp.fc2.b"])

    x = ad.linear(x_in, p["proj_in.w"], p["proj_in.b"])
    h = ad.add(ad.reshape(p["latents"], (1, c.n_latents, c.d)),
               ad.constant(np.zeros((bsz, 1, 1), dtype=p_dtype(conn))))
    t_emb = embed_timesteps(conn, ts) if variant.requires_timestep else None

    for i in range(c.blocks):
        if variant is Variant.RESAMPLER:
            q_in = ad.layer_norm(h, p[f"block{i}.norm1.g"], p[f"block{i}.norm1.b"])
        else:
            mod = ad.linear(t_emb, p[f"block{i}.adaln.w"], p[f"block{i}.adaln.b"])
            q_in = _apply_mod(h, ad.narrow(mod, -1, 0, c.d), ad.narrow(mod, -1, c.d, c.d))
        q = _heads_split(ad.linear(q_in, p[f"block{i}.attn.q.w"], p[f"block{i}.attn.q.b"]), c.heads)
        k = _heads_split(ad.linear(x, p[f"block{i}.attn.k.w"], p[f"block{i}.attn.k.b"]), c.heads)
        v = _heads_split(ad.linear(x, p[f"block{i}.attn.v.w"], p[f"block{i}.attn.v.b"]), c.heads)
        attn, weights = ad.scaled_dot_attention(q, k, v)
        if capture is not None:
            capture.append(weights.data.copy())
        attn = ad.linear(_heads_join(attn), p[f"block{i}.attn.o.w"], p[f"block{i}.attn.o.b"])
        if variant is Variant.RESAMPLER_ADALN_ZERO:
            gate = ad.linear(t_emb, p[f"block{i}.gate_attn.w"], p[f"block{i}.gate_attn.b"])
            attn = ad.mul(attn, ad.reshape(gate, (bsz, 1, c.d)))
        h = ad.add(h, attn)

        if variant is Variant.RESAMPLER:
            f_in = ad.layer_norm(h, p[f"block{i}.norm2.g"], p[f"block{i}.norm2.b"])
        else:
            f_in = _apply_mod(h, ad.narrow(mod, -1, 2 * c.d, c.d), ad.narrow(mod, -1, 3 * c.d, c.d))
        f = ad.linear(f_in, p[f"block{i}.ffn.fc1.w"], p[f"block{i}.ffn.fc1.b"])
        f = ad.linear(ad.gelu(f), p[f"block{i}.ffn.fc2.w"], p[f"block{i}.ffn.fc2.b"])
        if variant is Variant.RESAMPLER_ADALN_ZERO:
            gate = ad.linear(t_emb, p[f"block{i}.gate_ffn.w"], p[f"block{i}.gate_ffn.b"])
            f = ad.mul(f, ad.reshape(gate, (bsz, 1, c.d)))
        h = ad.add(h, f)

    return ad.layer_norm(h, p["final_norm.g"], p["final_norm.b"])


def p_dtype(conn: Connector):
    return next(iter(conn.params.values())).dtype


def connector_forward(conn: Connector, text: TextFeatureSequence, t: int = None) -> Tensor:
    """Map one token sequence to condition tokens [M, d].

    M is the latent count for resampler variants and the input length for
    the MLP. The timestep is required by the timestep-aware variants and
    ignored by the others.
    """
    if conn.variant.requires_timestep and t is None:
        raise ValueError(f"variant {conn.variant.value} requires a timestep")
    ts = np.asarray([int(t)]) if conn.variant.requires_timestep else None
    out = forward_batch(conn, text.features[None], ts)
    return ad.reshape(out, out.shape[1:])


def connector_meta(conn: Connector) -> dict:
    from dataclasses import asdict

    return {"kind": "connector", "variant": conn.variant.value,
            "config": asdict(conn.config)}


def connector_from_arrays(meta: dict, arrays: dict) -> Connector:
    if meta.get("kind") != "connector":
        raise ValueError(f"checkpoint holds {meta.get('kind')!r}, not a connector")
    config = ConnectorConfig(**meta["config"])
    variant = Variant(meta["variant"])
    conn = Connector(config, variant,
                     {k: ad.parameter(v.copy()) for k, v in arrays.items()})
    expected = count_parameters(config, variant)
    if n_allocated(conn) != expected:
        raise ValueError(f"checkpoint holds {n_allocated(conn)} scalars, expected {expected}")
    return conn


def extract_attention_scores(conn: Connector, text: TextFeatureSequence, t: int = None):
    """Cross-attention weights [heads, N, L] of each block, forward untouched."""
    if not conn.variant.is_resampler:
        raise UnsupportedVariant("the MLP connector has no attention to extract")
    if conn.variant.requires_timestep and t is None:
        raise ValueError(f"variant {conn.variant.value} requires a timestep")
    ts = np.asarray([int(t)]) if conn.variant.requires_timestep else None
    capture = []
    forward_batch(conn, text.features[None], ts, capture=capture)
    return [w[0] for w in capture]
