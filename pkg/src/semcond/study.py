"""Alignment-ordering experiment: one frozen backbone, three connectors.

Trains the denoiser once on pooled short-context conditioning, then trains
each connector variant against the frozen backbone with identical budgets,
and scores held-out prompts with the programmatic judge. Every artifact is
cached on disk keyed by a config fingerprint, so an interrupted run resumes
where it stopped.
"""

import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import diffusion as df
from . import dpgscore as dg
from . import toyworld as tw
from .checkpoint import load_checkpoint, save_checkpoint
from .connector import ConnectorConfig, Variant, connector_meta, init_connector
from .utils import rng_from


@dataclass(frozen=True)
class StudyConfig:
    train_scenes: int = 5000
    eval_prompts: int = 200
    images_per_prompt: int = 4
    seeds: tuple = (0, 1, 2)
    variants: tuple = ("mlp", "resampler", "resampler_adaln")
    stage1_steps: int = 8000
    stage1_lr: float = 3e-4
    stage1_condition_noise: float = 0.15
    stage2_steps: int = 5000
    stage2_lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 8
    guidance_scale: float = 1.0
    timesteps: int = 100
    d_llm: int = 128
    d: int = 64
    n_latents: int = 16
    blocks: int = 2
    heads: int = 4
    train_seed_base: int = 0
    eval_seed_base: int = 1_000_000

    def connector_config(self) -> ConnectorConfig:
        return ConnectorConfig(d_llm=self.d_llm, d=self.d, n_latents=self.n_latents,
                               blocks=self.blocks, heads=self.heads, ffn_mult=4,
                               d_t=self.d, max_tokens=48, timesteps=self.timesteps)

    def fingerprint(self) -> str:
        import hashlib

        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class StudyResult:
    scores: dict                 # variant -> {seed: overall}
    categories: dict             # variant -> {seed: {cat: value}}
    means: dict                  # variant -> mean over seeds
    ordering_holds: bool
    strict_gap_every_seed: bool
    config: dict = field(default_factory=dict)


def _eval_scenes(cfg: StudyConfig):
    return [tw.sample_scene(cfg.eval_seed_base + i) for i in range(cfg.eval_prompts)]


def sample_images_batched(den, conn, llm, scenes, images_per_prompt, guidance,
                          schedule, seed_tag, group_size=16):
    """Sample per-scene image sets, batching same-prompt-length scenes.

    Returns {scene.seed: [images_per_prompt, 3, H, W]}. Within a group every
    sampler step shares the timestep, so the connector forward batches the
    whole group; the per-scene noise comes from a scene-keyed stream, making
    results independent of the grouping.
    """
    buckets = {}
    for sc in scenes:
        toks, _ = tw.scene_to_prompt(sc)
        buckets.setdefault(len(toks), []).append((sc, toks))
    out = {}
    for length in sorted(buckets):
        group = buckets[length]
        for lo in range(0, len(group), group_size):
            chunk = group[lo : lo + group_size]
            n = len(chunk) * images_per_prompt
            if conn is None:
                feats = np.stack([tw.baseline_encode(toks, llm).features
                                  for _, toks in chunk])
                feats = np.repeat(feats, images_per_prompt, axis=0)
                fn = df.baseline_cond_fn(den, feats)
            else:
                feats = np.stack([llm.encode(toks).features for _, toks in chunk])
                feats = np.repeat(feats, images_per_prompt, axis=0)
                fn = df.connector_cond_fn(den, conn, feats)
            noise_rng = [rng_from(*seed_tag, "sample", sc.seed, k) for sc, _ in chunk
                         for k in range(images_per_prompt)]
            shape = (n, 3, den.config.image_size, den.config.image_size)
            x = np.stack([r.standard_normal(shape[1:]) for r in noise_rng]).astype(np.float32)
            for t in range(schedule.timesteps - 1, -1, -1):
                eps_c = df.denoiser_forward(den, x, t, fn(t)).data
                if guidance != 1.0:
                    eps_u = df.denoiser_forward(den, x, t, df.null_condition(den, n)).data
                    eps_hat = eps_u + guidance * (eps_c - eps_u)
                else:
                    eps_hat = eps_c
                beta = schedule.betas[t]
                mean = (x - (beta / np.sqrt(1.0 - schedule.alpha_bars[t])) * eps_hat)
                mean /= np.sqrt(schedule.alphas[t])
                if t > 0:
                    sigma = np.sqrt((1.0 - schedule.alpha_bars[t - 1])
                                    / (1.0 - schedule.alpha_bars[t]) * beta)
                    z = np.stack([r.standard_normal(shape[1:]) for r in noise_rng])
                    x = (mean + sigma * z).astype(np.float32)
                else:
                    x = mean.astype(np.float32)
            x = np.clip(x, -1.0, 1.0)
            for i, (sc, _) in enumerate(chunk):
                out[sc.seed] = x[i * images_per_prompt : (i + 1) * images_per_prompt]
    return out


def evaluate_connector(den, conn, llm, cfg: StudyConfig, schedule, seed_tag):
    scenes = _eval_scenes(cfg)
    images = sample_images_batched(den, conn, llm, scenes, cfg.images_per_prompt,
                                   cfg.guidance_scale, schedule, seed_tag)
    entries = []
    for sc in scenes:
        graph = tw.scene_to_graph(sc)
        answers = [tw.answer_graph(img, graph) for img in images[sc.seed]]
        entries.append((graph, answers))
    return dg.aggregate(entries)


def _cached(path, fingerprint):
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        rec = json.load(fh)
    return rec if rec.get("fingerprint") == fingerprint else None


def run_study(cfg: StudyConfig, workdir, log=print) -> StudyResult:
    os.makedirs(workdir, exist_ok=True)
    fp = cfg.fingerprint()
    llm = tw.PseudoLLM(d_llm=cfg.d_llm)
    schedule = df.default_schedule(cfg.timesteps)
    _, dataset = tw.make_dataset(cfg.train_scenes, cfg.train_seed_base)

    # stage 1, once
    den_path = os.path.join(workdir, "study_denoiser.ckpt")
    den_meta_path = os.path.join(workdir, "study_denoiser.json")
    if _cached(den_meta_path, fp):
        meta, arrays = load_checkpoint(den_path)
        den = df.denoiser_from_arrays(meta, arrays)
        log(f"[study] reusing stage-1 checkpoint {den_path}")
    else:
        t0 = time.time()
        tc = df.TrainConfig(learning_rate=cfg.stage1_lr, weight_decay=cfg.weight_decay,
                            steps=cfg.stage1_steps, batch_size=cfg.batch_size,
                            seed=cfg.train_seed_base, condition_dropout=0.1,
                            condition_noise=cfg.stage1_condition_noise)
        den = df.init_denoiser(df.DenoiserConfig(cond_dim=cfg.d, d_llm=cfg.d_llm),
                               seed=cfg.train_seed_base)
        den, metrics = df.train_denoiser_stage1(dataset, llm, tc, schedule, den=den)
        save_checkpoint(den_path, df.denoiser_meta(den),
                        {k: v.data for k, v in den.params.items()})
        with open(den_meta_path, "w") as fh:
            json.dump({"fingerprint": fp, "final_loss": metrics[-1][1]}, fh)
        log(f"[study] stage 1 trained in {(time.time() - t0) / 60:.1f} min, "
            f"loss {np.mean([m[1] for m in metrics[-200:]]):.4f}")
    den.freeze()
    den_hash = den.weight_hash()

    scores = {v: {} for v in cfg.variants}
    categories = {v: {} for v in cfg.variants}
    for seed in cfg.seeds:
        for vname in cfg.variants:
            tag = f"{vname}_seed{seed}"
            res_path = os.path.join(workdir, f"study_result_{tag}.json")
            cached = _cached(res_path, fp)
            if cached:
                scores[vname][seed] = cached["overall"]
                categories[vname][seed] = cached["per_category"]
                log(f"[study] reusing {tag}: {cached['overall']:.4f}")
                continue
            t0 = time.time()
            conn = init_connector(cfg.connector_config(), Variant(vname), seed=seed)
            tc = df.TrainConfig(learning_rate=cfg.stage2_lr, weight_decay=cfg.weight_decay,
                                steps=cfg.stage2_steps, batch_size=cfg.batch_size,
                                seed=seed, condition_dropout=0.0)
            conn, metrics = df.train_connector_stage2(den, llm, conn, dataset, tc, schedule)
            assert den.weight_hash() == den_hash, "stage 2 touched the frozen backbone"
            save_checkpoint(os.path.join(workdir, f"study_connector_{tag}.ckpt"),
                            connector_meta(conn), {k: v.data for k, v in conn.params.items()})
            train_min = (time.time() - t0) / 60
            t0 = time.time()
            result = evaluate_connector(den, conn, llm, cfg, schedule,
                                        seed_tag=(seed, vname))
            with open(res_path, "w") as fh:
                json.dump({"fingerprint": fp, "overall": result.overall,
                           "per_category": result.per_category,
                           "final_loss": metrics[-1][1]}, fh)
            scores[vname][seed] = result.overall
            categories[vname][seed] = result.per_category
            log(f"[study] {tag}: overall {result.overall:.4f} "
                f"(train {train_min:.1f} min, eval {(time.time() - t0) / 60:.1f} min)")

    means = {v: float(np.mean(list(scores[v].values()))) for v in cfg.variants}
    ranked = list(cfg.variants)
    ordering = all(means[ranked[i + 1]] >= means[ranked[i]] - 1e-12
                   for i in range(len(ranked) - 1))
    strict = all(scores[ranked[-1]][s] > scores[ranked[0]][s] for s in cfg.seeds)
    result = StudyResult(scores=scores, categories=categories, means=means,
                         ordering_holds=ordering, strict_gap_every_seed=strict,
                         config=asdict(cfg))
    with open(os.path.join(workdir, "study_summary.json"), "w") as fh:
        json.dump({"fingerprint": fp, "means": means, "scores": scores,
                   "ordering_holds": ordering,
                   "strict_gap_every_seed": strict}, fh, indent=2, sort_keys=True,
                  default=list)
        fh.write("\n")
    return result
