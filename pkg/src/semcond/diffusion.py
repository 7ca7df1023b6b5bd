"""Toy denoising-diffusion substrate with frozen-backbone two-stage training.

Stage 1 trains a small encoder-decoder noise predictor conditioned through
cross-attention on a pooled short-context text encoding (plus a learned null
token used for classifier-free guidance). Stage 2 freezes everything from
stage 1 and trains only a connector that replaces that baseline conditioning,
re-queried with the current timestep for the timestep-aware variants.

The denoiser runs at 32x32 with feature widths 32 at 16x16 and 64 at 8x8 and
cross-attention at both of those resolutions; it is kept deliberately small
so the whole study fits a single-core CPU budget.
"""

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .connector import Connector, forward_batch
from .utils import hash_arrays, rng_from, trunc_normal


# ---------------------------------------------------------------------------
# schedule and forward process
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionSchedule:
    timesteps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray


def make_schedule(timesteps: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    if timesteps < 1:
        raise ValueError("need at least one step")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    return DiffusionSchedule(timesteps, betas, alphas, np.cumprod(alphas))


def default_schedule(timesteps: int = 100) -> DiffusionSchedule:
    # variance budget comparable to the usual 1000-step linear schedule;
    # clamped so very short test schedules stay valid
    scale = 1000.0 / timesteps
    end = min(0.02 * scale, 0.5)
    return make_schedule(timesteps, min(1e-4 * scale, end), end)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise DimensionError(f"noise shape {eps.shape} != signal shape {x0.shape}")
    t = np.asarray(t)
    if ((t < 0) | (t >= schedule.timesteps)).any():
        raise ValueError("timestep out of range")
    ab = schedule.alpha_bars[t]
    ab = ab.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    in_channels: int = 3
    stem_channels: int = 16
    channels: tuple = (32, 64)
    cond_dim: int = 64
    t_sinusoid: int = 64
    t_dim: int = 128
    heads: int = 4
    d_llm: int = 128

    def __post_init__(self):
        if self.image_size % 4:
            raise ValueError("image size must allow two 2x downsamplings")


@dataclass
class Denoiser:
    config: DenoiserConfig
    params: dict = field(default_factory=dict)

    def weight_hash(self) -> str:
        return hash_arrays({k: v.data for k, v in self.params.items()})

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False

    def n_params(self) -> int:
        return sum(int(p.data.size) for p in self.params.values())


def init_denoiser(config: DenoiserConfig, seed: int = 0, dtype=np.float32) -> Denoiser:
    rng = rng_from(seed, "denoiser")
    p = {}

    def lin(name, din, dout, zero=False):
        if zero:
            p[f"{name}.w"] = ad.parameter(np.zeros((din, dout), dtype=dtype))
        else:
            p[f"{name}.w"] = ad.parameter(
                rng.normal(0.0, 1.0 / np.sqrt(din), (din, dout)).astype(dtype))
        p[f"{name}.b"] = ad.parameter(np.zeros(dout, dtype=dtype))

    def conv(name, cin, cout, k=3, zero=False):
        fan = cin * k * k
        if zero:
            p[f"{name}.w"] = ad.parameter(np.zeros((cout, cin, k, k), dtype=dtype))
        else:
            p[f"{name}.w"] = ad.parameter(
                rng.normal(0.0, 1.0 / np.sqrt(fan), (cout, cin, k, k)).astype(dtype))
        p[f"{name}.b"] = ad.parameter(np.zeros(cout, dtype=dtype))

    def norm(name, ch):
        p[f"{name}.g"] = ad.parameter(np.ones(ch, dtype=dtype))
        p[f"{name}.b"] = ad.parameter(np.zeros(ch, dtype=dtype))

    def res_block(name, ch):
        norm(f"{name}.norm", ch)
        conv(f"{name}.conv", ch, ch)
        lin(f"{name}.tproj", config.t_dim, ch)

    def attn_block(name, ch):
        norm(f"{name}.norm", ch)
        # per-token normalization of the condition keeps the frozen attention
        # usable for conditioning sources it never saw in stage 1
        norm(f"{name}.cnorm", config.cond_dim)
        lin(f"{name}.q", ch, ch)
        lin(f"{name}.k", config.cond_dim, ch)
        lin(f"{name}.v", config.cond_dim, ch)
        lin(f"{name}.o", ch, ch)

    c16, c8 = config.channels
    lin("temb.fc1", config.t_sinusoid, config.t_dim)
    lin("temb.fc2", config.t_dim, config.t_dim)
    # full-resolution stem: the identity path input -> skip -> output head
    # must exist for the net to pass per-pixel noise through
    conv("conv_in", config.in_channels, config.stem_channels)
    conv("down1", config.stem_channels, c16)          # stride 2 at forward
    res_block("enc16", c16)
    attn_block("attn16", c16)
    conv("down2", c16, c8)                            # stride 2 at forward
    res_block("mid8a", c8)
    attn_block("attn8", c8)
    res_block("mid8b", c8)
    lin("up1", c8, c16)
    res_block("dec16", c16)
    lin("up2", c16, config.stem_channels)
    norm("out.norm", config.stem_channels)
    conv("out.conv1", config.stem_channels, config.stem_channels)
    conv("out.conv2", config.stem_channels, config.in_channels, zero=True)
    p["null_token"] = ad.parameter(trunc_normal(rng, (1, config.cond_dim), 0.02, dtype))
    lin("cond_proj", config.d_llm, config.cond_dim)
    return Denoiser(config, p)


def _res_block(p, name, h, t_emb):
    n = ad.silu(ad.channel_norm(h, p[f"{name}.norm.g"], p[f"{name}.norm.b"]))
    n = ad.conv2d(n, p[f"{name}.conv.w"], p[f"{name}.conv.b"], stride=1, pad=1)
    tp = ad.linear(t_emb, p[f"{name}.tproj.w"], p[f"{name}.tproj.b"])
    bsz, ch = tp.shape
    return ad.add(h, ad.add(n, ad.reshape(tp, (bsz, ch, 1, 1))))


def _attn_block(p, name, h, cond, heads):
    bsz, ch, hh, ww = h.shape
    seq = ad.reshape(ad.transpose(h, (0, 2, 3, 1)), (bsz, hh * ww, ch))
    n = ad.layer_norm(seq, p[f"{name}.norm.g"], p[f"{name}.norm.b"])
    cond_n = ad.layer_norm(cond, p[f"{name}.cnorm.g"], p[f"{name}.cnorm.b"])
    q = ad.linear(n, p[f"{name}.q.w"], p[f"{name}.q.b"])
    k = ad.linear(cond_n, p[f"{name}.k.w"], p[f"{name}.k.b"])
    v = ad.linear(cond_n, p[f"{name}.v.w"], p[f"{name}.v.b"])

    def split(x):
        b, n_, d_ = x.shape
        return ad.transpose(ad.reshape(x, (b, n_, heads, d_ // heads)), (0, 2, 1, 3))

    att, _ = ad.scaled_dot_attention(split(q), split(k), split(v))
    b, he, n_, dh = att.shape
    att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, n_, he * dh))
    seq = ad.add(seq, ad.linear(att, p[f"{name}.o.w"], p[f"{name}.o.b"]))
    return ad.transpose(ad.reshape(seq, (bsz, hh, ww, ch)), (0, 3, 1, 2))


def denoiser_forward(den: Denoiser, x_t: np.ndarray, t, cond) -> Tensor:
    """Predict the noise in x_t given condition tokens.

    x_t: [B, 3, H, W] (or unbatched), t: int or [B], cond: Tensor or array
    [B, M, cond_dim] (or [M, cond_dim]). Condition tokens carry no position
    signal, so the output is invariant to their order.
    """
    p, cfg = den.params, den.config
    x_t = np.asarray(x_t, dtype=np.float32)
    squeeze = x_t.ndim == 3
    if squeeze:
        x_t = x_t[None]
    bsz = x_t.shape[0]
    if x_t.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise DimensionError(f"bad image shape {x_t.shape}")
    ts = np.broadcast_to(np.asarray(t, dtype=np.int64), (bsz,))
    if not isinstance(cond, Tensor):
        cond = ad.constant(np.asarray(cond, dtype=np.float32))
    if cond.ndim == 2:
        cond = ad.reshape(cond, (1,) + cond.shape)
        if bsz > 1:
            cond = ad.add(cond, ad.constant(np.zeros((bsz, 1, 1), dtype=np.float32)))
    if cond.shape[-1] != cfg.cond_dim:
        raise DimensionError(f"condition width {cond.shape[-1]} != {cfg.cond_dim}")

    enc = ad.constant(ad.sinusoidal_encoding(ts, cfg.t_sinusoid))
    t_emb = ad.linear(ad.silu(ad.linear(ad.constant(enc.data), p["temb.fc1.w"], p["temb.fc1.b"])),
                      p["temb.fc2.w"], p["temb.fc2.b"])

    h0 = ad.conv2d(ad.constant(x_t), p["conv_in.w"], p["conv_in.b"], stride=1, pad=1)
    h = ad.conv2d(h0, p["down1.w"], p["down1.b"], stride=2, pad=1)
    h = _res_block(p, "enc16", h, t_emb)
    h = _attn_block(p, "attn16", h, cond, cfg.heads)
    skip16 = h
    h = ad.conv2d(h, p["down2.w"], p["down2.b"], stride=2, pad=1)
    h = _res_block(p, "mid8a", h, t_emb)
    h = _attn_block(p, "attn8", h, cond, cfg.heads)
    h = _res_block(p, "mid8b", h, t_emb)
    h = ad.upsample_nearest2x(h)
    h = _pointwise(h, p["up1.w"], p["up1.b"])
    h = ad.add(h, skip16)
    h = _res_block(p, "dec16", h, t_emb)
    h = ad.upsample_nearest2x(h)
    h = _pointwise(h, p["up2.w"], p["up2.b"])
    h = ad.add(h, h0)
    h = ad.silu(ad.channel_norm(h, p["out.norm.g"], p["out.norm.b"]))
    h = ad.conv2d(h, p["out.conv1.w"], p["out.conv1.b"], stride=1, pad=1)
    h = ad.conv2d(ad.silu(h), p["out.conv2.w"], p["out.conv2.b"], stride=1, pad=1)
    return ad.reshape(h, h.shape[1:]) if squeeze else h


def _pointwise(h, w, b):
    # 1x1 convolution as a matmul over the channel axis
    bsz, ch, hh, ww = h.shape
    seq = ad.reshape(ad.transpose(h, (0, 2, 3, 1)), (bsz, hh * ww, ch))
    seq = ad.linear(seq, w, b)
    cout = w.shape[1]
    return ad.transpose(ad.reshape(seq, (bsz, hh, ww, cout)), (0, 3, 1, 2))


def denoiser_meta(den: Denoiser) -> dict:
    from dataclasses import asdict

    cfg = asdict(den.config)
    cfg["channels"] = list(cfg["channels"])
    return {"kind": "denoiser", "config": cfg}


def denoiser_from_arrays(meta: dict, arrays: dict) -> Denoiser:
    if meta.get("kind") != "denoiser":
        raise ValueError(f"checkpoint holds {meta.get('kind')!r}, not a denoiser")
    cfg = dict(meta["config"])
    cfg["channels"] = tuple(cfg["channels"])
    return Denoiser(DenoiserConfig(**cfg),
                    {k: ad.parameter(v.copy()) for k, v in arrays.items()})


def null_condition(den: Denoiser, bsz: int, n_tokens: int = 1) -> Tensor:
    """The learned null token tiled for a batch; the uncond branch of CFG."""
    null = den.params["null_token"]
    cond = ad.reshape(null, (1, 1, den.config.cond_dim))
    return ad.add(cond, ad.constant(np.zeros((bsz, n_tokens, 1), dtype=np.float32)))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """First-order adaptive moments with decoupled weight decay."""

    def __init__(self, params: dict, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        for name, p in params.items():
            assert p.requires_grad, f"optimizer given frozen parameter {name!r}"
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            assert p.requires_grad, f"attempted update of frozen parameter {name!r}"
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            if self.weight_decay:
                p.data -= (self.lr * self.weight_decay) * p.data
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    steps: int = 1000
    batch_size: int = 8
    seed: int = 0
    condition_dropout: float = 0.1
    guidance_scale: float = 3.0
    # stage-1 only: jitter on condition tokens widens the conditioning
    # manifold the frozen cross-attention will accept in stage 2
    condition_noise: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0 or self.steps < 1 or not 0 <= self.condition_dropout < 1:
            raise ValueError("bad training configuration")
        if self.guidance_scale < 1:
            raise ValueError("guidance_scale must be >= 1")
        if self.condition_noise < 0:
            raise ValueError("condition_noise must be nonnegative")


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr", "wall_ms"])
        for r in rows:
            w.writerow([r[0], repr(float(r[1])), repr(float(r[2])), f"{r[3]:.3f}"])


@dataclass
class TrainState:
    """Optimizer moments plus RNG position; checkpointing this makes a
    resumed run continue the exact step sequence of an uninterrupted one."""

    step: int = 0
    opt_m: dict = None
    opt_v: dict = None
    rng_state: dict = None

    def adopt(self, opt: "AdamW", rng) -> int:
        if self.step:
            opt.t = self.step
            opt.m = {k: v.copy() for k, v in self.opt_m.items()}
            opt.v = {k: v.copy() for k, v in self.opt_v.items()}
            rng.bit_generator.state = self.rng_state
        return self.step

    def capture(self, opt: "AdamW", rng, step: int) -> None:
        self.step = step
        self.opt_m = {k: v.copy() for k, v in opt.m.items()}
        self.opt_v = {k: v.copy() for k, v in opt.v.items()}
        self.rng_state = rng.bit_generator.state


def train_denoiser_stage1(dataset, llm, config: TrainConfig, schedule: DiffusionSchedule,
                          den: Denoiser = None, log_every: int = 0,
                          state: TrainState = None):
    """MSE noise-prediction training under the pooled baseline conditioning.

    dataset: list of (image [3,H,W] float32, TokenSequence). Returns
    (denoiser, metrics rows). Passing a TrainState resumes from its step and
    leaves it updated.
    """
    from .toyworld import baseline_encode

    if not dataset:
        raise ValueError("empty dataset")
    if den is None:
        den = init_denoiser(DenoiserConfig(d_llm=llm.d_llm), seed=config.seed)
    base_feats = np.stack([baseline_encode(toks, llm).features for _, toks in dataset])
    images = np.stack([img for img, _ in dataset]).astype(np.float32)
    rng = rng_from(config.seed, "stage1")
    opt = AdamW(den.params, config.learning_rate, config.weight_decay)
    start = state.adopt(opt, rng) if state is not None else 0
    metrics = []
    for step in range(start, config.steps):
        t0 = time.perf_counter()
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        x0 = images[idx]
        ts = rng.integers(0, schedule.timesteps, size=config.batch_size)
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        x_t = q_sample(x0, ts, eps, schedule)
        feats = ad.constant(base_feats[idx])
        cond = ad.linear(feats, den.params["cond_proj.w"], den.params["cond_proj.b"])
        keep = (rng.random(config.batch_size) >= config.condition_dropout).astype(np.float32)
        cond = _mix_null(den, cond, keep)
        if config.condition_noise:
            jitter = rng.normal(0.0, config.condition_noise, cond.shape).astype(np.float32)
            cond = ad.add(cond, ad.constant(jitter))
        loss = ad.mse_loss(denoiser_forward(den, x_t, ts, cond), ad.constant(eps))
        ad.zero_grads(den.params)
        loss.backward()
        opt.step()
        metrics.append((step, float(loss.data), config.learning_rate,
                        (time.perf_counter() - t0) * 1e3))
        if log_every and step % log_every == 0:
            recent = np.mean([m[1] for m in metrics[-log_every:]])
            print(f"[stage1] step {step} loss {recent:.4f}", flush=True)
    if state is not None:
        state.capture(opt, rng, config.steps)
    return den, metrics


def _mix_null(den: Denoiser, cond, keep: np.ndarray):
    bsz = cond.shape[0]
    if (keep == 1.0).all():
        return cond
    m1 = ad.constant(keep.reshape(bsz, 1, 1))
    m0 = ad.constant((1.0 - keep).reshape(bsz, 1, 1).astype(np.float32))
    null = ad.reshape(den.params["null_token"], (1, 1, den.config.cond_dim))
    return ad.add(ad.mul(cond, m1), ad.mul(null, m0))


def train_connector_stage2(den: Denoiser, llm, conn: Connector, dataset,
                           config: TrainConfig, schedule: DiffusionSchedule,
                           log_every: int = 0, state: TrainState = None):
    """Train only the connector against the frozen denoiser and encoder.

    Batches are grouped by token length so variable-length prompts batch
    without masking. Returns (connector, metrics rows). A TrainState resumes
    and is updated in place.
    """
    if not dataset:
        raise ValueError("empty dataset")
    den.freeze()
    den_hash = den.weight_hash()
    llm_hash = hash_arrays(llm.weight_arrays())
    feats = [llm.encode(toks).features for _, toks in dataset]
    images = np.stack([img for img, _ in dataset]).astype(np.float32)
    buckets = {}
    for i, f in enumerate(feats):
        buckets.setdefault(len(f), []).append(i)
    lengths = sorted(buckets)
    weights = np.array([len(buckets[l]) for l in lengths], dtype=np.float64)
    weights /= weights.sum()
    rng = rng_from(config.seed, "stage2", conn.variant.value)
    opt = AdamW(conn.params, config.learning_rate, config.weight_decay)
    start = state.adopt(opt, rng) if state is not None else 0
    dropout = config.condition_dropout
    metrics = []
    for step in range(start, config.steps):
        t0 = time.perf_counter()
        bucket = buckets[lengths[rng.choice(len(lengths), p=weights)]]
        idx = np.asarray(bucket)[rng.integers(0, len(bucket), size=config.batch_size)]
        x0 = images[idx]
        ts = rng.integers(0, schedule.timesteps, size=config.batch_size)
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        x_t = q_sample(x0, ts, eps, schedule)
        fb = np.stack([feats[i] for i in idx])
        cond = forward_batch(conn, fb, ts if conn.variant.requires_timestep else None)
        if dropout:
            keep = (rng.random(config.batch_size) >= dropout).astype(np.float32)
            cond = _mix_null(den, cond, keep)
        loss = ad.mse_loss(denoiser_forward(den, x_t, ts, cond), ad.constant(eps))
        ad.zero_grads(conn.params)
        loss.backward()
        opt.step()
        metrics.append((step, float(loss.data), config.learning_rate,
                        (time.perf_counter() - t0) * 1e3))
        if log_every and step % log_every == 0:
            recent = np.mean([m[1] for m in metrics[-log_every:]])
            print(f"[stage2/{conn.variant.value}] step {step} loss {recent:.4f}", flush=True)
    if state is not None:
        state.capture(opt, rng, config.steps)
    assert den.weight_hash() == den_hash, "frozen denoiser drifted during stage 2"
    assert hash_arrays(llm.weight_arrays()) == llm_hash, "frozen encoder drifted during stage 2"
    return conn, metrics


def save_train_state(path, state: TrainState) -> None:
    from .checkpoint import save_checkpoint

    arrays = {}
    arrays.update({f"m.{k}": v for k, v in (state.opt_m or {}).items()})
    arrays.update({f"v.{k}": v for k, v in (state.opt_v or {}).items()})
    save_checkpoint(path, {"kind": "train-state", "step": state.step,
                           "rng_state": state.rng_state}, arrays)


def load_train_state(path) -> TrainState:
    from .checkpoint import load_checkpoint

    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "train-state":
        raise ValueError(f"checkpoint holds {meta.get('kind')!r}, not train state")
    return TrainState(
        step=int(meta["step"]),
        opt_m={k[2:]: v for k, v in arrays.items() if k.startswith("m.")},
        opt_v={k[2:]: v for k, v in arrays.items() if k.startswith("v.")},
        rng_state=meta["rng_state"],
    )


def stage2_loss(den: Denoiser, conn: Connector, feats: np.ndarray, x0: np.ndarray,
                ts: np.ndarray, eps: np.ndarray, schedule: DiffusionSchedule) -> Tensor:
    """One stage-2 objective evaluation; the gradient-check entry point."""
    x_t = q_sample(x0, ts, eps, schedule)
    cond = forward_batch(conn, feats, ts if conn.variant.requires_timestep else None)
    return ad.mse_loss(denoiser_forward(den, x_t, ts, cond), ad.constant(eps))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample(den: Denoiser, schedule: DiffusionSchedule, cond_fn, n_images: int,
           guidance_scale: float = 1.0, seed: int = 0, clip=(-1.0, 1.0)) -> np.ndarray:
    """Ancestral sampling from pure noise; returns [n, 3, H, W] in the clip range.

    cond_fn(t) returns condition tokens [n, M, cond_dim] for the whole batch
    at that timestep; timestep-aware connectors produce fresh tokens per step.
    With guidance_scale == 1 only the conditional branch is evaluated, which
    is algebraically exact since the null branch cancels.
    """
    cfg = den.config
    rng = rng_from(seed, "sample")
    shape = (n_images, cfg.in_channels, cfg.image_size, cfg.image_size)
    x = rng.standard_normal(shape).astype(np.float32)
    for t in range(schedule.timesteps - 1, -1, -1):
        eps_c = denoiser_forward(den, x, t, cond_fn(t)).data
        if guidance_scale != 1.0:
            eps_u = denoiser_forward(den, x, t, null_condition(den, n_images)).data
            eps_hat = eps_u + guidance_scale * (eps_c - eps_u)
        else:
            eps_hat = eps_c
        beta = schedule.betas[t]
        alpha = schedule.alphas[t]
        abar = schedule.alpha_bars[t]
        mean = (x - (beta / np.sqrt(1.0 - abar)) * eps_hat) / np.sqrt(alpha)
        if t > 0:
            abar_prev = schedule.alpha_bars[t - 1]
            sigma = np.sqrt((1.0 - abar_prev) / (1.0 - abar) * beta)
            x = (mean + sigma * rng.standard_normal(shape)).astype(np.float32)
        else:
            x = mean.astype(np.float32)
    return np.clip(x, clip[0], clip[1])


def connector_cond_fn(den: Denoiser, conn: Connector, feats_batch: np.ndarray):
    """Per-step condition source; caches when the variant ignores time."""
    bsz = feats_batch.shape[0]
    if conn.variant.requires_timestep:
        def fn(t):
            ts = np.full(bsz, t, dtype=np.int64)
            return ad.constant(forward_batch(conn, feats_batch, ts).data)
        return fn
    cached = ad.constant(forward_batch(conn, feats_batch, None).data)
    return lambda t: cached


def baseline_cond_fn(den: Denoiser, base_feats: np.ndarray):
    feats = ad.constant(base_feats.astype(np.float32))
    cond = ad.linear(feats, den.params["cond_proj.w"], den.params["cond_proj.b"])
    cached = ad.constant(cond.data)
    return lambda t: cached
