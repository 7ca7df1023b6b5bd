"""Command-line workflow: fixtures, two-stage training, sampling, scoring,
attention tracing, and parameter accounting.

Every command is deterministic given (config, seed) and writes a manifest
(config hash, code version, seeds, backend) next to its outputs. Exit codes:
0 success, 2 validation failure, 3 I/O failure. An output directory is
guarded by a lock file so only one command works in it at a time.
"""

import argparse
import contextlib
import copy
import hashlib
import json
import os
import sys

from . import __version__
from .backend import active_backend
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .utils import hash_arrays, rng_from

CONFIG_VERSION = 1

CONFIG_DEFAULTS = {
    "config_version": CONFIG_VERSION,
    "seed": 0,
    "out_dir": "runs/default",
    "connector": {
        "variant": "resampler_adaln",
        "d_llm": 128, "d": 64, "n_latents": 16, "blocks": 2, "heads": 4,
        "ffn_mult": 4, "d_t": 64, "max_tokens": 48, "timesteps": 100,
    },
    "diffusion": {
        "learning_rate": 1e-4, "weight_decay": 0.01, "steps": 1000,
        "batch_size": 8, "condition_dropout": 0.1, "guidance_scale": 3.0,
        "stage1_learning_rate": 3e-4, "stage1_steps": 1000,
        "stage1_condition_noise": 0.15,
    },
    "toyworld": {
        "train_scenes": 1000, "eval_scenes": 50, "max_objects": 4,
        "d_llm": 128, "encoder_seed": 7001, "eval_seed_base": 1000000,
    },
    "score": {"images_per_prompt": 4},
    "analysis": {"trace_points": 10},
}


class ValidationFailure(Exception):
    pass


def _merge_validate(defaults, override, path=""):
    out = copy.deepcopy(defaults)
    for key, val in override.items():
        if key not in defaults:
            raise ValidationFailure(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                raise ValidationFailure(f"{path + key!r} must be an object")
            out[key] = _merge_validate(defaults[key], val, path + key + ".")
        else:
            out[key] = val
    return out


def load_config(path=None, overrides=None):
    cfg = copy.deepcopy(CONFIG_DEFAULTS)
    if path:
        with open(path) as fh:
            cfg = _merge_validate(CONFIG_DEFAULTS, json.load(fh))
    for key, val in (overrides or {}).items():
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node[p]
        if parts[-1] not in node:
            raise ValidationFailure(f"unknown override key {key!r}")
        node[parts[-1]] = val
    return cfg


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


@contextlib.contextmanager
def output_lock(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    lock_path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"output directory is locked by {lock_path}; "
                      "remove it if no other run is active")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.unlink(lock_path)


def write_manifest(out_dir, cfg, command, extra=None):
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "code_version": __version__,
        "backend": active_backend(),
        "seed": cfg["seed"],
    }
    manifest.update(extra or {})
    with open(os.path.join(out_dir, f"manifest_{command}.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _build_llm(cfg):
    from .toyworld import PseudoLLM

    return PseudoLLM(d_llm=cfg["toyworld"]["d_llm"], seed=cfg["toyworld"]["encoder_seed"])


def _connector_config(cfg):
    from .connector import ConnectorConfig

    c = dict(cfg["connector"])
    c.pop("variant")
    return ConnectorConfig(**c)


def _schedule(cfg):
    from .diffusion import default_schedule

    return default_schedule(cfg["connector"]["timesteps"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_fixtures(cfg, args):
    from . import dpgscore, toyworld

    out = cfg["out_dir"]
    tw_cfg = cfg["toyworld"]
    with output_lock(out):
        n = tw_cfg["train_scenes"]
        scenes = [toyworld.sample_scene(cfg["seed"] * 1000000 + i, tw_cfg["max_objects"])
                  for i in range(n)]
        toyworld.save_scenes(os.path.join(out, "scenes.jsonl"), scenes)
        with open(os.path.join(out, "prompts.txt"), "w") as fh:
            for sc in scenes:
                fh.write(toyworld.scene_to_prompt(sc)[1] + "\n")
        graphs = [toyworld.scene_to_graph(sc) for sc in scenes]
        for g in graphs:
            violations = dpgscore.validate_graph(g)
            if violations:
                raise ValidationFailure(f"generated graph invalid: {violations}")
        dpgscore.save_graphs(os.path.join(out, "graphs.jsonl"), graphs)
        write_manifest(out, cfg, "gen-fixtures", {"scenes": n})
    print(f"wrote {n} scenes, prompts and graphs under {out}")
    return 0


def cmd_train(cfg, args):
    from . import diffusion as df
    from . import toyworld as tw
    from .connector import Variant, connector_from_arrays, connector_meta, init_connector

    out = cfg["out_dir"]
    d_cfg = cfg["diffusion"]
    llm = _build_llm(cfg)
    sch = _schedule(cfg)
    _, dataset = tw.make_dataset(cfg["toyworld"]["train_scenes"], cfg["seed"] * 1000000,
                                 cfg["toyworld"]["max_objects"])
    with output_lock(out):
        if args.stage == 1:
            tc = df.TrainConfig(
                learning_rate=d_cfg["stage1_learning_rate"],
                weight_decay=d_cfg["weight_decay"],
                steps=d_cfg["stage1_steps"], batch_size=d_cfg["batch_size"],
                seed=cfg["seed"], condition_dropout=d_cfg["condition_dropout"],
                guidance_scale=d_cfg["guidance_scale"],
                condition_noise=d_cfg["stage1_condition_noise"],
            )
            ckpt = os.path.join(out, "denoiser.ckpt")
            state_path = ckpt + ".train"
            state = df.TrainState()
            if args.resume:
                meta, arrays = load_checkpoint(ckpt)
                den = df.denoiser_from_arrays(meta, arrays)
                state = df.load_train_state(state_path)
                print(f"resuming stage 1 at step {state.step}")
            else:
                den_cfg = df.DenoiserConfig(cond_dim=cfg["connector"]["d"], d_llm=llm.d_llm)
                den = df.init_denoiser(den_cfg, seed=cfg["seed"])
            den, metrics = df.train_denoiser_stage1(dataset, llm, tc, sch, den=den,
                                                    log_every=args.log_every, state=state)
            save_checkpoint(ckpt, df.denoiser_meta(den),
                            {k: v.data for k, v in den.params.items()})
            df.save_train_state(state_path, state)
            df.write_metrics(os.path.join(out, "metrics_stage1.csv"), metrics)
            write_manifest(out, cfg, "train-stage1",
                           {"denoiser_hash": den.weight_hash(),
                            "final_loss": metrics[-1][1] if metrics else None})
            print(f"stage 1 done; denoiser hash {den.weight_hash()[:16]} -> {ckpt}")
        else:
            den_path = args.denoiser or os.path.join(out, "denoiser.ckpt")
            meta, arrays = load_checkpoint(den_path)
            den = df.denoiser_from_arrays(meta, arrays)
            pre_hash = den.weight_hash()
            llm_pre = hash_arrays(llm.weight_arrays())
            variant = Variant(args.variant or cfg["connector"]["variant"])
            ckpt = os.path.join(out, f"connector_{variant.value}.ckpt")
            state_path = ckpt + ".train"
            state = df.TrainState()
            if args.resume:
                cmeta, carrays = load_checkpoint(ckpt)
                conn = connector_from_arrays(cmeta, carrays)
                state = df.load_train_state(state_path)
                print(f"resuming stage 2 ({variant.value}) at step {state.step}")
            else:
                conn = init_connector(_connector_config(cfg), variant, seed=cfg["seed"])
            tc = df.TrainConfig(
                learning_rate=d_cfg["learning_rate"], weight_decay=d_cfg["weight_decay"],
                steps=d_cfg["steps"], batch_size=d_cfg["batch_size"], seed=cfg["seed"],
                condition_dropout=0.0, guidance_scale=d_cfg["guidance_scale"],
            )
            conn, metrics = df.train_connector_stage2(den, llm, conn, dataset, tc, sch,
                                                      log_every=args.log_every, state=state)
            frozen_ok = den.weight_hash() == pre_hash and hash_arrays(llm.weight_arrays()) == llm_pre
            print(f"freeze-hash check: denoiser+encoder bit-identical = {frozen_ok}")
            if not frozen_ok:
                raise AssertionError("freeze contract violated")
            save_checkpoint(ckpt, connector_meta(conn),
                            {k: v.data for k, v in conn.params.items()})
            df.save_train_state(state_path, state)
            df.write_metrics(os.path.join(out, f"metrics_stage2_{variant.value}.csv"), metrics)
            write_manifest(out, cfg, f"train-stage2-{variant.value}",
                           {"denoiser_hash": pre_hash,
                            "final_loss": metrics[-1][1] if metrics else None})
            print(f"stage 2 ({variant.value}) done -> {ckpt}")
    return 0


def _load_connector(path):
    from .connector import connector_from_arrays

    meta, arrays = load_checkpoint(path)
    return connector_from_arrays(meta, arrays)


def _load_denoiser(path):
    from .diffusion import denoiser_from_arrays

    meta, arrays = load_checkpoint(path)
    return denoiser_from_arrays(meta, arrays)


def _sample_for_scenes(cfg, den, conn, llm, scenes, images_per_prompt, guidance, seed_tag):
    """Sample images_per_prompt images per scene, batching within one scene."""
    from . import diffusion as df
    from . import toyworld as tw

    sch = _schedule(cfg)
    out = []
    for sc in scenes:
        toks, _ = tw.scene_to_prompt(sc)
        if conn is None:
            bf = tw.baseline_encode(toks, llm).features[None].repeat(images_per_prompt, axis=0)
            fn = df.baseline_cond_fn(den, bf)
        else:
            feats = llm.encode(toks).features[None].repeat(images_per_prompt, axis=0)
            fn = df.connector_cond_fn(den, conn, feats)
        imgs = df.sample(den, sch, fn, images_per_prompt, guidance_scale=guidance,
                         seed=rng_from(seed_tag, sc.seed).integers(0, 2**31 - 1))
        out.append((sc, imgs))
    return out


def cmd_sample(cfg, args):
    from . import toyworld as tw

    out = cfg["out_dir"]
    llm = _build_llm(cfg)
    den = _load_denoiser(args.denoiser or os.path.join(out, "denoiser.ckpt"))
    conn = _load_connector(args.connector) if args.connector else None
    scenes = [tw.sample_scene(s) for s in args.scene_seeds]
    with output_lock(out):
        pairs = _sample_for_scenes(cfg, den, conn, llm, scenes, args.n_images,
                                   cfg["diffusion"]["guidance_scale"], cfg["seed"])
        for sc, imgs in pairs:
            for i, img in enumerate(imgs):
                tw.write_raw_tensor(os.path.join(out, f"sample_{sc.seed}_{i}.f32"), img)
        write_manifest(out, cfg, "sample",
                       {"scene_seeds": args.scene_seeds, "n_images": args.n_images})
    print(f"wrote {sum(len(i) for _, i in pairs)} images under {out}")
    return 0


def cmd_eval(cfg, args):
    from . import dpgscore as dg
    from . import toyworld as tw

    out = cfg["out_dir"]
    tw_cfg = cfg["toyworld"]
    llm = _build_llm(cfg)
    den = _load_denoiser(args.denoiser or os.path.join(out, "denoiser.ckpt"))
    conn = _load_connector(args.connector) if args.connector else None
    n_img = cfg["score"]["images_per_prompt"]
    scenes = [tw.sample_scene(tw_cfg["eval_seed_base"] + i, tw_cfg["max_objects"])
              for i in range(tw_cfg["eval_scenes"])]
    with output_lock(out):
        pairs = _sample_for_scenes(cfg, den, conn, llm, scenes, n_img,
                                   cfg["diffusion"]["guidance_scale"], cfg["seed"])
        entries, answer_rows = [], []
        for sc, imgs in pairs:
            graph = tw.scene_to_graph(sc)
            answers = [tw.answer_graph(img, graph) for img in imgs]
            entries.append((graph, answers))
            answer_rows.extend((graph.prompt_id, i, a) for i, a in enumerate(answers))
        result = dg.aggregate(entries)
        dg.save_answers(os.path.join(out, "answers.jsonl"), answer_rows)
        dg.save_graphs(os.path.join(out, "eval_graphs.jsonl"), [g for g, _ in entries])
        dg.emit_report(result, out)
        write_manifest(out, cfg, "eval", {"overall": result.overall,
                                          "per_category": result.per_category})
    print(f"overall {result.overall:.4f}  " +
          "  ".join(f"{k} {v:.4f}" for k, v in result.per_category.items()))
    return 0


def cmd_trace(cfg, args):
    from . import analysis
    from . import toyworld as tw

    out = cfg["out_dir"]
    llm = _build_llm(cfg)
    conn = _load_connector(args.connector)
    sc = tw.sample_scene(args.scene_seed)
    toks, readable = tw.scene_to_prompt(sc)
    text = llm.encode(toks)
    grid = analysis.default_timestep_grid(conn.config.timesteps,
                                          cfg["analysis"]["trace_points"])
    trace = analysis.trace_attention(conn, text, grid)
    with output_lock(out):
        analysis.emit_trace_csv(trace, os.path.join(out, "trace.csv"))
        write_manifest(out, cfg, "trace", {"scene_seed": args.scene_seed,
                                           "prompt": readable})
    print(f"trace for {readable!r} -> {os.path.join(out, 'trace.csv')}")
    return 0


def cmd_count_params(cfg, args):
    from .connector import (REFERENCE_CONFIG, Variant, count_parameters,
                            init_connector, n_allocated)

    variants = [Variant(args.variant)] if args.variant else list(Variant)
    config = REFERENCE_CONFIG if args.reference else _connector_config(cfg)
    print(f"{'variant':26s} {'closed-form':>14s} {'allocated':>14s}")
    for v in variants:
        closed = count_parameters(config, v)
        if args.reference:
            # allocating the reference-size tensors is wasteful; closed form only
            print(f"{v.value:26s} {closed:14d} {'-':>14s}")
        else:
            alloc = n_allocated(init_connector(config, v, seed=0))
            print(f"{v.value:26s} {closed:14d} {alloc:14d}")
    if args.reference and not args.variant:
        delta = (count_parameters(config, Variant.RESAMPLER_ADALN_ZERO)
                 - count_parameters(config, Variant.RESAMPLER_ADALN))
        print(f"{'adaln_zero - adaln':26s} {delta:14d}")
    return 0


def cmd_score(cfg, args):
    from . import dpgscore as dg

    graphs = {g.prompt_id: g for g in dg.load_graphs(args.graphs)}
    rows = dg.load_answers(args.answers)
    grouped = {}
    for prompt_id, idx, answers in rows:
        grouped.setdefault(prompt_id, []).append((idx, answers))
    entries = []
    for prompt_id, items in grouped.items():
        if prompt_id not in graphs:
            raise ValidationFailure(f"answers reference unknown prompt {prompt_id!r}")
        entries.append((graphs[prompt_id], [a for _, a in sorted(items)]))
    result = dg.aggregate(entries)
    out = cfg["out_dir"]
    with output_lock(out):
        dg.emit_report(result, out)
        write_manifest(out, cfg, "score", {"overall": result.overall})
    print(f"overall {result.overall:.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _parse_override(kv):
    key, _, raw = kv.partition("=")
    if not _:
        raise argparse.ArgumentTypeError(f"override {kv!r} must look like key=value")
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key, val


def build_parser():
    p = argparse.ArgumentParser(prog="semcond", description=__doc__)
    p.add_argument("--config", help="JSON config file; defaults are documented built-ins")
    p.add_argument("--set", metavar="KEY=VAL", type=_parse_override, action="append",
                   default=[], help="override a config key, e.g. --set seed=3 "
                   "(flags take precedence over the config file)")
    p.add_argument("--out-dir", help="shorthand for --set out_dir=...")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-fixtures", help="write scene/prompt/graph fixtures")

    t = sub.add_parser("train", help="stage 1 (denoiser) or stage 2 (connector)")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--variant", choices=("mlp", "resampler", "resampler_adaln",
                                         "resampler_adaln_zero"))
    t.add_argument("--denoiser", help="stage-1 checkpoint path (stage 2 only)")
    t.add_argument("--resume", action="store_true",
                   help="continue a previous run from its checkpoint and train state")
    t.add_argument("--log-every", type=int, default=0)

    s = sub.add_parser("sample", help="generate images for scene seeds")
    s.add_argument("--denoiser")
    s.add_argument("--connector")
    s.add_argument("--scene-seeds", type=int, nargs="+", required=True)
    s.add_argument("--n-images", type=int, default=4)

    e = sub.add_parser("eval", help="sample eval scenes, judge, and score")
    e.add_argument("--denoiser")
    e.add_argument("--connector")

    tr = sub.add_parser("trace", help="attention trace over timesteps")
    tr.add_argument("--connector", required=True)
    tr.add_argument("--scene-seed", type=int, default=0)

    c = sub.add_parser("count-params", help="closed-form and allocated counts")
    c.add_argument("--variant", choices=("mlp", "resampler", "resampler_adaln",
                                         "resampler_adaln_zero"))
    c.add_argument("--reference", action="store_true",
                   help="use the pinned reference configuration")

    sc = sub.add_parser("score", help="score existing answer files")
    sc.add_argument("--graphs", required=True)
    sc.add_argument("--answers", required=True)
    return p


COMMANDS = {
    "gen-fixtures": cmd_gen_fixtures,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "trace": cmd_trace,
    "count-params": cmd_count_params,
    "score": cmd_score,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = dict(args.set)
        if args.out_dir:
            overrides["out_dir"] = args.out_dir
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except (ValidationFailure, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
