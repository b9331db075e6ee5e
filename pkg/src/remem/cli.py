"""Command-line interface: every pipeline stage, scriptable and exact.

Thin wrappers over the library: each subcommand parses flags, calls the
same functions tests call directly, and prints either human-readable lines
or, with --json, a stable machine-readable document.

Exit codes: 0 success, 1 validation/input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import assocmem, editops, genmodel, metrics, rankreduce, rewrite
from .genmodel import FixtureError
from .rewrite import DivergenceError, OptimConfig


class _CliError(Exception):
    """Validation failure; message is the one-line user-facing error."""


def _cache_dir() -> Path:
    env = os.environ.get("REMEM_CACHE_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "remem"


def _require_file(path: str, kind: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise _CliError(f"{kind} not found: {p}")
    return p


def _load_model(path: str):
    return genmodel.load_fixture(_require_file(path, "model file"))


def _emit(args, payload: dict, human: str | None = None) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    elif human is not None:
        print(human)


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s != ""]
    except ValueError as e:
        raise _CliError(f"bad seed list {text!r}: {e}") from e


def stats_cache_key(model_hash: str, layer: int, samples: int, seed: int, epsilon) -> str:
    blob = json.dumps(
        {"model": model_hash, "layer": layer, "samples": samples, "seed": seed,
         "epsilon": epsilon},
        sort_keys=True,
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


def _stats_for(gen, model_hash: str, layer: int, samples: int, seed: int, epsilon=None):
    """Fetch key statistics through the on-disk cache."""
    cache = _cache_dir()
    key = stats_cache_key(model_hash, layer, samples, seed, epsilon)
    path = cache / f"stats-{key}.gtf"
    if path.is_file():
        stats, _ = assocmem.load_key_stats(path)
        return stats, path, True
    stats = assocmem.estimate_key_stats(gen, layer, samples, seed, epsilon)
    cache.mkdir(parents=True, exist_ok=True)
    assocmem.save_key_stats(
        stats, path,
        {"model": model_hash, "layer": layer, "samples": samples, "seed": seed},
    )
    return stats, path, False


# ---------------------------------------------------------------------------
# Subcommand handlers.
# ---------------------------------------------------------------------------


def _cmd_fixture_gen(args) -> int:
    gen, manifest = genmodel.build_planted_generator(
        seed=args.seed,
        n_rules=args.rules,
        memory_layer=args.memory_layer,
        value_amp=args.value_amp,
    )
    genmodel.save_planted(gen, manifest, args.out)
    h = genmodel.generator_hash(gen)
    _emit(args, {"command": "fixture-gen", "ok": True, "out": str(args.out), "hash": h},
          f"wrote planted fixture {args.out} (hash {h[:16]})")
    return 0


def _cmd_fixture_import(args) -> int:
    gen = _load_model(args.weights)
    genmodel.save_fixture(gen, args.out)
    h = genmodel.generator_hash(gen)
    _emit(args, {"command": "fixture-import", "ok": True, "out": str(args.out), "hash": h},
          f"imported {args.weights} -> {args.out} (hash {h[:16]})")
    return 0


def _cmd_stats_build(args) -> int:
    gen = _load_model(args.model)
    model_hash = genmodel.generator_hash(gen)
    stats, path, cached = _stats_for(
        gen, model_hash, args.layer, args.samples, args.seed, args.epsilon
    )
    _emit(
        args,
        {
            "command": "stats-build", "ok": True, "cache_file": str(path),
            "cached": cached, "epsilon": stats.epsilon, "dim": stats.dim,
        },
        f"key stats for layer {args.layer}: {path} ({'cache hit' if cached else 'built'})",
    )
    return 0


def _resolve_session(args):
    session_path = _require_file(args.session, "session file")
    session = editops.load_session(session_path)
    model_path = getattr(args, "model", None) or session.model
    if model_path is None:
        raise _CliError("session names no model; pass --model")
    resolved = Path(model_path)
    if not resolved.is_absolute():
        resolved = session_path.parent / resolved
    return session, _load_model(resolved)


def _cmd_edit_apply(args) -> int:
    session, gen = _resolve_session(args)
    model_hash = genmodel.generator_hash(gen)
    stats, _, _ = _stats_for(
        gen, model_hash, session.layer, session.stats_samples, session.stats_seed
    )
    app = editops.apply_edit(gen, session, stats=stats)
    genmodel.save_fixture(app.generator, args.out)
    if args.result_json:
        rewrite.save_edit_result(app.result, args.result_json)
    _emit(
        args,
        {
            "command": "edit-apply", "ok": True, "out": str(args.out),
            "hash": app.generator_hash,
            "final_loss": float(app.result.loss_trace[-1]),
            "constraint_residual": app.result.constraint_residual,
        },
        f"edit applied -> {args.out} (hash {app.generator_hash[:16]}, "
        f"final loss {app.result.loss_trace[-1]:.3e})",
    )
    return 0


def _cmd_baseline_finetune_all(args) -> int:
    gen = _load_model(args.model)
    edited = _load_model(args.edited)
    seeds = _parse_seeds(args.seeds)
    if not seeds:
        raise _CliError("need at least one exemplar seed")
    exemplars = []
    for s in seeds:
        z = genmodel.sample_latents(s, 1, gen.latent_dim)[0]
        exemplars.append((z, genmodel.forward(edited, z).astype(np.float64)))
    cfg = OptimConfig(learning_rate=args.lr, iterations=args.iterations, seed=args.seed)
    res = rewrite.finetune_all(gen, exemplars, lam_weight=args.lam, cfg=cfg)
    genmodel.save_fixture(res.generator, args.out)
    h = genmodel.generator_hash(res.generator)
    _emit(args, {"command": "baseline-finetune-all", "ok": True, "out": str(args.out),
                 "hash": h, "final_loss": float(res.loss_trace[-1])},
          f"finetuned all weights -> {args.out} (final loss {res.loss_trace[-1]:.3e})")
    return 0


def _cmd_baseline_layer(args) -> int:
    session, gen = _resolve_session(args)
    v_star, box, cell_mask = editops.extract_copy_value(gen, session)
    k_star = editops.make_paste_target(gen, session, (box[2], box[3]))
    layer = gen.layers[session.layer - 1]
    mask = cell_mask if session.loss_outside_mask == "masked" else None
    res = rewrite.finetune_layer_unconstrained(
        gen, session.layer, k_star, v_star, cfg=session.config, mask=mask
    )
    new_layer = genmodel.LayerSpec(
        assocmem.to_layer(res.view), layer.bias, layer.nonlinearity, layer.upsample
    )
    out_gen = gen.replace_layer(session.layer, new_layer)
    genmodel.save_fixture(out_gen, args.out)
    h = genmodel.generator_hash(out_gen)
    _emit(args, {"command": "baseline-layer", "ok": True, "out": str(args.out), "hash": h,
                 "final_loss": float(res.loss_trace[-1])},
          f"unconstrained layer fit -> {args.out} (final loss {res.loss_trace[-1]:.3e})")
    return 0


def _cmd_baseline_zero_units(args) -> int:
    gen = _load_model(args.model)
    if args.units:
        unit_idx = _parse_seeds(args.units)
        layer_idx = args.layer
        if layer_idx is None:
            raise _CliError("--layer is required with --units")
    else:
        if not args.session:
            raise _CliError("pass either --units or --session for unit scoring")
        session, sgen = _resolve_session(args)
        selection = editops.collect_context_keys(sgen, session)
        # score the key channels, i.e. the output units of layer L-1
        layer_idx = session.layer - 1
        if layer_idx < 1:
            raise _CliError("cannot zero units below the first layer")
        sigma = np.sqrt(np.maximum(np.diag(
            assocmem.estimate_key_stats(
                sgen, session.layer, session.stats_samples, session.stats_seed
            ).C), 1e-12))
        scores, order = rankreduce.axis_aligned_scores(selection.keys, sigma)
        top = max(1, int(round(args.fraction * len(scores))))
        unit_idx = [int(i) for i in order[:top]]
    layer = gen.layers[layer_idx - 1]
    zeroed = rewrite.zero_units(layer, unit_idx)
    out_gen = gen.replace_layer(layer_idx, zeroed)
    genmodel.save_fixture(out_gen, args.out)
    h = genmodel.generator_hash(out_gen)
    _emit(args, {"command": "baseline-zero-units", "ok": True, "out": str(args.out),
                 "hash": h, "layer": layer_idx, "units": unit_idx},
          f"zeroed units {unit_idx} of layer {layer_idx} -> {args.out}")
    return 0


def _cmd_discover(args) -> int:
    gen = _load_model(args.model)
    pairs_dir = Path(args.pairs)
    if not pairs_dir.is_dir():
        raise _CliError(f"pairs directory not found: {pairs_dir}")
    pairs = []
    for path in sorted(pairs_dir.glob("*.gtf")):
        tensors, meta = genmodel.read_gtf(path)
        if "target" not in tensors or "mask" not in tensors:
            raise _CliError(f"{path}: pair file needs 'target' and 'mask' tensors")
        seed = int(meta.get("seed", 0))
        z = genmodel.sample_latents(seed, 1, gen.latent_dim)[0]
        pairs.append((z, tensors["target"].astype(np.float64), tensors["mask"] > 0.5))
    if not pairs:
        raise _CliError(f"no pair files (*.gtf) in {pairs_dir}")
    cfg = OptimConfig(
        learning_rate=args.lr, iterations=args.iterations,
        project_every=args.project_every, optimizer=args.optimizer, seed=args.seed,
    )
    res = rewrite.rank_constrained_discovery(gen, pairs, rank=args.rank, cfg=cfg)
    payload = {
        "command": "discover", "ok": True, "best_layer": res.best_layer,
        "per_layer_losses": [float(x) for x in res.per_layer_losses],
    }
    if args.out:
        genmodel.save_fixture(res.generator, args.out)
        payload["out"] = str(args.out)
    _emit(args, payload,
          f"best layer: {res.best_layer}  losses: "
          + " ".join(f"L{i + 1}={l:.3e}" for i, l in enumerate(res.per_layer_losses)))
    return 0


def _cmd_eval_layers(args) -> int:
    gen = _load_model(args.model)
    report = metrics.layer_selection_report(gen, args.samples, args.seed)
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
    _emit(args, {"command": "eval-layers", "ok": True, **report.to_json_dict()},
          report.format_table())
    return 0


def _cmd_eval_masked(args) -> int:
    before = _load_model(args.before)
    after = _load_model(args.after)
    seeds = _parse_seeds(args.seeds)
    try:
        y0, y1, x0, x1 = (int(v) for v in args.mask_box.split(","))
    except ValueError as e:
        raise _CliError(f"bad --mask-box {args.mask_box!r}; expected y0,y1,x0,x1") from e
    b_imgs, a_imgs, masks = [], [], []
    for s in seeds:
        z = genmodel.sample_latents(s, 1, before.latent_dim)[0]
        b = genmodel.forward(before, z)
        a = genmodel.forward(after, z)
        m = np.zeros(b.shape[1:], dtype=bool)
        m[y0:y1, x0:x1] = True
        b_imgs.append(b)
        a_imgs.append(a)
        masks.append(m)
    out = metrics.masked_change(b_imgs, a_imgs, masks)
    _emit(args, {"command": "eval-masked", "ok": True, **out},
          f"off-mask change: mean {out['mean']:.6f} max {out['max']:.6f}")
    return 0


def _cmd_eval_efficacy(args) -> int:
    gen_before, _, _ = genmodel.load_fixture_full(args.before)
    _, manifest = genmodel.load_planted(args.before)
    gen_after = _load_model(args.after)
    frac = metrics.efficacy_planted_rule(gen_before, gen_after, manifest, args.n, seed=args.seed)
    _emit(args, {"command": "eval-efficacy", "ok": True, "fraction_flipped": frac},
          f"fraction of rule locations flipped: {frac:.3f}")
    return 0


def _cmd_render(args) -> int:
    gen = _load_model(args.model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for s in _parse_seeds(args.seeds):
        z = genmodel.sample_latents(s, 1, gen.latent_dim)[0]
        if args.isolate:
            try:
                y, x = (int(v) for v in args.isolate.split(","))
            except ValueError as e:
                raise _CliError(f"bad --isolate {args.isolate!r}; expected y,x") from e
            if args.layer is None:
                raise _CliError("--isolate requires --layer")
            _, v_map = genmodel.features(gen, z, args.layer)
            img = genmodel.render_isolated_patch(gen, v_map, (y, x), args.layer)
        else:
            img = genmodel.forward(gen, z)
        path = out_dir / f"seed{s}.png"
        genmodel.save_png(img, path)
        written.append(str(path))
    _emit(args, {"command": "render", "ok": True, "files": written},
          "\n".join(written))
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    models = {}
    for spec in args.model or []:
        if "=" in spec:
            name, path = spec.split("=", 1)
        else:
            path = spec
            name = Path(path).stem
        models[name] = _require_file(path, "model file")
    app = create_app(models)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# ---------------------------------------------------------------------------
# Parser.
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _CliError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="remem", description=__doc__)
    p.add_argument("--json", action="store_true", help="machine-readable output")
    sub = p.add_subparsers(dest="command", required=True)

    fx = sub.add_parser("fixture", help="create or import generator fixtures")
    fxs = fx.add_subparsers(dest="subcommand", required=True)
    g = fxs.add_parser("gen", help="build a planted-rule generator")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--rules", type=int, default=2)
    g.add_argument("--memory-layer", type=int, default=4)
    g.add_argument("--value-amp", type=float, default=1.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_fixture_gen)
    im = fxs.add_parser("import", help="validate and canonicalize a GTF fixture")
    im.add_argument("--weights", required=True)
    im.add_argument("--out", required=True)
    im.set_defaults(func=_cmd_fixture_import)

    st = sub.add_parser("stats", help="key statistics caches")
    sts = st.add_subparsers(dest="subcommand", required=True)
    sb = sts.add_parser("build", help="build (or reuse) a key-stats cache")
    sb.add_argument("--model", required=True)
    sb.add_argument("--layer", type=int, required=True)
    sb.add_argument("--samples", type=int, default=128)
    sb.add_argument("--seed", type=int, default=100)
    sb.add_argument("--epsilon", type=float, default=None)
    sb.set_defaults(func=_cmd_stats_build)

    ed = sub.add_parser("edit", help="apply edit sessions")
    eds = ed.add_subparsers(dest="subcommand", required=True)
    ea = eds.add_parser("apply", help="apply a session file to its model")
    ea.add_argument("--session", required=True)
    ea.add_argument("--model", help="override the session's model path")
    ea.add_argument("--out", required=True)
    ea.add_argument("--result-json", help="also write the optimization record")
    ea.set_defaults(func=_cmd_edit_apply)

    bl = sub.add_parser("baseline", help="comparison baselines")
    bls = bl.add_subparsers(dest="subcommand", required=True)
    fa = bls.add_parser("finetune-all", help="fine-tune every weight toward an edited model")
    fa.add_argument("--model", required=True)
    fa.add_argument("--edited", required=True, help="model whose renders are the targets")
    fa.add_argument("--seeds", required=True, help="comma-separated exemplar seeds")
    fa.add_argument("--lam", type=float, default=1.0)
    fa.add_argument("--lr", type=float, default=1e-4)
    fa.add_argument("--iterations", type=int, default=2001)
    fa.add_argument("--seed", type=int, default=0)
    fa.add_argument("--out", required=True)
    fa.set_defaults(func=_cmd_baseline_finetune_all)
    bl2 = bls.add_parser("layer", help="unconstrained single-layer fit of a session")
    bl2.add_argument("--session", required=True)
    bl2.add_argument("--model")
    bl2.add_argument("--out", required=True)
    bl2.set_defaults(func=_cmd_baseline_layer)
    zu = bls.add_parser("zero-units", help="zero output channels (ablation baseline)")
    zu.add_argument("--model", required=True)
    zu.add_argument("--layer", type=int, help="layer whose output units to zero")
    zu.add_argument("--units", help="comma-separated unit indices")
    zu.add_argument("--session", help="score units from this session's context")
    zu.add_argument("--fraction", type=float, default=0.3)
    zu.add_argument("--out", required=True)
    zu.set_defaults(func=_cmd_baseline_zero_units)

    dc = sub.add_parser("discover", help="find the layer storing a rule")
    dc.add_argument("--model", required=True)
    dc.add_argument("--pairs", required=True, help="directory of pair .gtf files")
    dc.add_argument("--rank", type=int, default=1)
    dc.add_argument("--lr", type=float, default=0.05)
    dc.add_argument("--iterations", type=int, default=2001)
    dc.add_argument("--project-every", type=int, default=10)
    dc.add_argument("--optimizer", default="adam_style")
    dc.add_argument("--seed", type=int, default=0)
    dc.add_argument("--out", help="write the best-layer edited model here")
    dc.set_defaults(func=_cmd_discover)

    ev = sub.add_parser("eval", help="evaluation metrics")
    evs = ev.add_subparsers(dest="subcommand", required=True)
    el = evs.add_parser("layers", help="patch-independence layer report")
    el.add_argument("--model", required=True)
    el.add_argument("--samples", type=int, default=64)
    el.add_argument("--seed", type=int, default=0)
    el.add_argument("--out", help="write the JSON report here")
    el.set_defaults(func=_cmd_eval_layers)
    em = evs.add_parser("masked", help="off-mask change between two models")
    em.add_argument("--before", required=True)
    em.add_argument("--after", required=True)
    em.add_argument("--seeds", required=True)
    em.add_argument("--mask-box", required=True, help="y0,y1,x0,x1 region meant to change")
    em.set_defaults(func=_cmd_eval_masked)
    ef = evs.add_parser("efficacy", help="planted-rule flip fraction")
    ef.add_argument("--before", required=True, help="planted fixture (with manifest)")
    ef.add_argument("--after", required=True)
    ef.add_argument("--n", type=int, default=100)
    ef.add_argument("--seed", type=int, default=4242)
    ef.set_defaults(func=_cmd_eval_efficacy)

    rn = sub.add_parser("render", help="render samples to PNG")
    rn.add_argument("--model", required=True)
    rn.add_argument("--seeds", required=True)
    rn.add_argument("--layer", type=int)
    rn.add_argument("--isolate", help="y,x location to render in isolation")
    rn.add_argument("--out", required=True)
    rn.set_defaults(func=_cmd_render)

    sv = sub.add_parser("serve", help="run the HTTP editing service")
    sv.add_argument("--port", type=int, default=8321)
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--model", action="append", help="name=path or path (repeatable)")
    sv.set_defaults(func=_cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, FixtureError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (editops.EditError, DivergenceError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
