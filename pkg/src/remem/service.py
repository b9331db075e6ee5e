"""HTTP/JSON API hosting models and interactive edit sessions.

Each session wraps one base model with a draft edit (copy/paste/context
masks plus settings) and a history stack of applied generators, so apply
and undo walk the stack while the base stays immutable.  Previews run the
same pipeline at a reduced iteration count for quick feedback; apply uses
the session's full settings.  Replaying a session document through this
API yields the same generator bytes as the command-line path.
"""

from __future__ import annotations

import base64
import threading
import uuid
from dataclasses import dataclass, field, replace

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.responses import HTMLResponse

from . import assocmem, editops, genmodel, rewrite
from .editops import EditError, EditSession, RegionMask
from .genmodel import Generator
from .rewrite import DivergenceError, OptimConfig

PREVIEW_ITERATIONS = 201
DEFAULT_RENDER_SEEDS = (0, 1, 2, 3)


@dataclass
class SessionState:
    """One user's editing session against an immutable base model."""

    session_id: str
    model_id: str
    base: Generator
    layer: int = 4
    rank: int = 1
    method: str = "lambda"
    config: OptimConfig = field(default_factory=OptimConfig)
    stats_samples: int = 128
    stats_seed: int = 100
    copy_mask: RegionMask | None = None
    paste_seed: int | None = None
    paste_offset: tuple[int, int] | None = None
    context: list = field(default_factory=list)
    history: list = field(default_factory=list)  # (generator, hash) after each apply
    last_directions=None
    last_result: rewrite.EditResult | None = None
    busy: bool = False
    progress: dict = field(default_factory=lambda: {"state": "idle"})
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def current(self) -> Generator:
        return self.history[-1][0] if self.history else self.base

    @property
    def current_hash(self) -> str | None:
        return self.history[-1][1] if self.history else None

    def build_session(self) -> EditSession:
        if self.copy_mask is None:
            raise _invalid("copy mask not set")
        if self.paste_seed is None or self.paste_offset is None:
            raise _invalid("paste placement not set")
        try:
            return EditSession(
                layer=self.layer,
                copy=self.copy_mask,
                paste_seed=self.paste_seed,
                paste_offset=self.paste_offset,
                context=tuple(self.context),
                rank=self.rank,
                config=self.config,
                method=self.method,
                stats_samples=self.stats_samples,
                stats_seed=self.stats_seed,
            )
        except ValueError as e:
            raise _invalid(str(e)) from e


def _invalid(detail: str) -> HTTPException:
    return HTTPException(status_code=422, detail=detail)


def _bad_request(detail: str) -> HTTPException:
    return HTTPException(status_code=400, detail=detail)


def _decode_mask(payload: dict, image_hw: tuple[int, int]) -> RegionMask:
    try:
        seed = int(payload["seed"])
        grid = editops.decode_rle(payload["mask"])
    except (KeyError, TypeError, ValueError) as e:
        raise _bad_request(f"malformed mask payload: {e}") from e
    if grid.shape != image_hw:
        raise _bad_request(
            f"mask shape {grid.shape} does not match image {image_hw}"
        )
    return RegionMask(seed=seed, grid=grid)


def _png_b64(image: np.ndarray) -> str:
    return base64.b64encode(genmodel.image_to_png_bytes(image)).decode("ascii")


def create_app(model_paths: dict) -> FastAPI:
    """Build the service; model_paths maps model id -> fixture path."""
    app = FastAPI(title="remem rewriting service")
    models: dict[str, dict] = {}
    for name, path in model_paths.items():
        gen = genmodel.load_fixture(path)
        models[name] = {
            "generator": gen,
            "path": str(path),
            "hash": genmodel.generator_hash(gen),
        }
    sessions: dict[str, SessionState] = {}
    stats_cache: dict = {}

    def _session(session_id: str) -> SessionState:
        state = sessions.get(session_id)
        if state is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return state

    def _image_hw(gen: Generator) -> tuple[int, int]:
        size = gen.base_size
        for layer in gen.layers:
            size *= layer.upsample
        return (size, size)

    def _stats_for(state: SessionState, session: EditSession):
        key = (state.model_id, session.layer, session.stats_samples, session.stats_seed)
        if key not in stats_cache:
            stats_cache[key] = assocmem.estimate_key_stats(
                state.base, session.layer, session.stats_samples, session.stats_seed
            )
        return stats_cache[key]

    def _run_edit(state: SessionState, session: EditSession, total: int):
        def progress(iteration, loss):
            state.progress = {
                "state": "running",
                "iteration": int(iteration),
                "total": int(total),
                "loss": float(loss),
            }

        stats = _stats_for(state, session)
        try:
            return editops.apply_edit(state.base, session, stats=stats, progress=progress)
        except EditError as e:
            if isinstance(e.cause, (ValueError,)) and e.stage in (
                "copy extraction", "paste placement", "context collection", "rank reduction",
            ):
                raise _invalid(str(e)) from e
            raise HTTPException(status_code=500, detail=f"numerical failure: {e}") from e
        except DivergenceError as e:
            raise HTTPException(status_code=500, detail=f"numerical failure: {e}") from e
        finally:
            state.progress = {"state": "idle"}

    def _acquire(state: SessionState):
        with state.lock:
            if state.busy:
                raise HTTPException(
                    status_code=409, detail="an edit is already running for this session"
                )
            state.busy = True

    def _release(state: SessionState):
        with state.lock:
            state.busy = False

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/models")
    def list_models():
        return {
            "models": [
                {"id": name, "hash": info["hash"], "path": info["path"]}
                for name, info in sorted(models.items())
            ]
        }

    @app.post("/sessions", status_code=201)
    def create_session(payload: dict):
        model_id = payload.get("model")
        if model_id not in models:
            raise HTTPException(status_code=404, detail=f"unknown model {model_id!r}")
        state = SessionState(
            session_id=uuid.uuid4().hex[:12],
            model_id=model_id,
            base=models[model_id]["generator"],
        )
        document = payload.get("session")
        if document is not None:
            try:
                session = editops.session_from_dict(document)
            except (KeyError, TypeError, ValueError) as e:
                raise _bad_request(f"malformed session document: {e}") from e
            state.layer = session.layer
            state.rank = session.rank
            state.method = session.method
            state.config = session.config
            state.stats_samples = session.stats_samples
            state.stats_seed = session.stats_seed
            state.copy_mask = session.copy
            state.paste_seed = session.paste_seed
            state.paste_offset = session.paste_offset
            state.context = list(session.context)
        sessions[state.session_id] = state
        return {"id": state.session_id, "model": model_id}

    @app.get("/sessions/{session_id}")
    def session_info(session_id: str):
        state = _session(session_id)
        return {
            "id": state.session_id,
            "model": state.model_id,
            "layer": state.layer,
            "rank": state.rank,
            "method": state.method,
            "config": {
                "learning_rate": state.config.learning_rate,
                "iterations": state.config.iterations,
                "project_every": state.config.project_every,
                "optimizer": state.config.optimizer,
                "seed": state.config.seed,
            },
            "has_copy": state.copy_mask is not None,
            "has_paste": state.paste_seed is not None,
            "context_count": len(state.context),
            "applied": len(state.history),
            "current_hash": state.current_hash,
        }

    @app.put("/sessions/{session_id}/settings")
    def update_settings(session_id: str, payload: dict):
        state = _session(session_id)
        with state.lock:
            if "layer" in payload:
                layer = int(payload["layer"])
                if not 1 <= layer <= state.base.n_layers:
                    raise _bad_request(f"layer must be 1..{state.base.n_layers}")
                state.layer = layer
            if "rank" in payload:
                rank = int(payload["rank"])
                if rank < 1:
                    raise _bad_request("rank must be >= 1")
                state.rank = rank
            if "method" in payload:
                if payload["method"] not in ("lambda", "projected_gd"):
                    raise _bad_request(f"unknown method {payload['method']!r}")
                state.method = payload["method"]
            if "config" in payload:
                cfg = payload["config"]
                try:
                    state.config = replace(
                        state.config,
                        **{
                            k: type(getattr(state.config, k))(v)
                            for k, v in cfg.items()
                            if hasattr(state.config, k)
                        },
                    )
                except (TypeError, ValueError) as e:
                    raise _bad_request(f"bad config: {e}") from e
        return {"ok": True}

    @app.put("/sessions/{session_id}/copy")
    def put_copy(session_id: str, payload: dict):
        state = _session(session_id)
        mask = _decode_mask(payload, _image_hw(state.base))
        if not mask.grid.any():
            raise _invalid("copy mask selects nothing")
        with state.lock:
            state.copy_mask = mask
        return {"ok": True, "cells": int(mask.grid.sum())}

    @app.put("/sessions/{session_id}/paste")
    def put_paste(session_id: str, payload: dict):
        state = _session(session_id)
        try:
            seed = int(payload["seed"])
            oy, ox = (int(v) for v in payload["offset"])
        except (KeyError, TypeError, ValueError) as e:
            raise _bad_request(f"malformed paste payload: {e}") from e
        with state.lock:
            state.paste_seed = seed
            state.paste_offset = (oy, ox)
        return {"ok": True}

    @app.put("/sessions/{session_id}/context")
    def put_context(session_id: str, payload: dict):
        state = _session(session_id)
        raw = payload.get("masks")
        if not isinstance(raw, list):
            raise _bad_request("context payload needs a 'masks' list")
        hw = _image_hw(state.base)
        masks = [_decode_mask(m, hw) for m in raw]
        for i, m in enumerate(masks):
            if not m.grid.any():
                raise _invalid(f"context mask {i} selects nothing")
        with state.lock:
            state.context = masks
        return {"ok": True, "count": len(masks)}

    def _gallery(state: SessionState, seeds) -> dict:
        out = {}
        for seed in seeds:
            z = genmodel.sample_latents(int(seed), 1, state.base.latent_dim)[0]
            entry = {"before": _png_b64(genmodel.forward(state.base, z))}
            entry["after"] = (
                _png_b64(genmodel.forward(state.current, z)) if state.history else None
            )
            out[str(int(seed))] = entry
        return out

    @app.get("/sessions/{session_id}/samples")
    def samples(session_id: str, seeds: str = "0,1,2,3"):
        state = _session(session_id)
        try:
            seed_list = [int(s) for s in seeds.split(",") if s != ""]
        except ValueError as e:
            raise _bad_request(f"bad seeds {seeds!r}") from e
        if not seed_list:
            raise _bad_request("no seeds given")
        return {"samples": _gallery(state, seed_list)}

    @app.get("/sessions/{session_id}/render/{seed}.png")
    def render_png(session_id: str, seed: int, which: str = "before"):
        state = _session(session_id)
        if which not in ("before", "after"):
            raise _bad_request("which must be 'before' or 'after'")
        gen = state.base if which == "before" else state.current
        z = genmodel.sample_latents(seed, 1, gen.latent_dim)[0]
        png = genmodel.image_to_png_bytes(genmodel.forward(gen, z))
        return Response(content=png, media_type="image/png")

    @app.post("/sessions/{session_id}/preview")
    def preview(session_id: str, payload: dict | None = None):
        state = _session(session_id)
        payload = payload or {}
        session = state.build_session()
        iterations = int(payload.get("iterations", PREVIEW_ITERATIONS))
        session = replace(
            session,
            config=replace(session.config, iterations=iterations),
            render_seeds=tuple(payload.get("seeds", DEFAULT_RENDER_SEEDS)),
        )
        _acquire(state)
        try:
            application = _run_edit(state, session, iterations)
        finally:
            _release(state)
        state.last_directions = application.directions
        return {
            "loss_trace": [float(x) for x in application.result.loss_trace[::10]],
            "final_loss": float(application.result.loss_trace[-1]),
            "constraint_residual": application.result.constraint_residual,
            "hash": application.generator_hash,
            "committed": False,
            "config_echo": _config_echo(state, session),
            "samples": {
                str(seed): {
                    "before": _png_b64(application.before_renders[seed]),
                    "after": _png_b64(application.after_renders[seed]),
                }
                for seed in application.before_renders
            },
        }

    @app.post("/sessions/{session_id}/apply")
    def apply(session_id: str, payload: dict | None = None):
        state = _session(session_id)
        session = state.build_session()
        _acquire(state)
        try:
            application = _run_edit(state, session, session.config.iterations)
        finally:
            _release(state)
        with state.lock:
            state.history.append((application.generator, application.generator_hash))
            state.last_directions = application.directions
            state.last_result = application.result
        return {
            "hash": application.generator_hash,
            "final_loss": float(application.result.loss_trace[-1]),
            "constraint_residual": application.result.constraint_residual,
            "applied": len(state.history),
            "committed": True,
            "config_echo": _config_echo(state, session),
        }

    @app.post("/sessions/{session_id}/undo")
    def undo(session_id: str):
        state = _session(session_id)
        with state.lock:
            if not state.history:
                raise _invalid("nothing to undo")
            state.history.pop()
            return {"applied": len(state.history), "current_hash": state.current_hash}

    @app.get("/sessions/{session_id}/progress")
    def progress(session_id: str):
        state = _session(session_id)
        return dict(state.progress)

    @app.get("/sessions/{session_id}/relevance")
    def relevance(session_id: str, n: int = 200, top: int = 12):
        state = _session(session_id)
        if state.last_directions is None:
            raise _invalid("run a preview or apply first to derive a context direction")
        scores = editops.context_relevance(
            state.base, state.layer, state.last_directions, range(n)
        )
        ranked = sorted(scores.items(), key=lambda kv: -kv[1])[:top]
        return {"relevance": [{"seed": s, "score": v} for s, v in ranked]}

    @app.get("/sessions/{session_id}/export")
    def export_session(session_id: str):
        state = _session(session_id)
        session = state.build_session()
        return editops.session_to_dict(session)

    def _config_echo(state: SessionState, session: EditSession) -> dict:
        return {
            "layer": session.layer,
            "rank": session.rank,
            "method": session.method,
            "stats": {"n_samples": session.stats_samples, "seed": session.stats_seed},
            "config": {
                "learning_rate": session.config.learning_rate,
                "iterations": session.config.iterations,
                "project_every": session.config.project_every,
                "optimizer": session.config.optimizer,
                "seed": session.config.seed,
            },
        }

    @app.get("/", response_class=HTMLResponse)
    def index():
        return (
            "<html><body><h3>remem rewriting service</h3>"
            "<p>JSON API; see /models, /healthz. The browser editor lives in "
            "the ui/ package and talks to these endpoints.</p></body></html>"
        )

    return app
