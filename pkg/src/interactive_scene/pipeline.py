"""End-to-end reconstruction: load, build the graph, match, align, validate, export."""

from __future__ import annotations

import json
import logging
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import AlignmentResult, align_shortlist, all_diverged, write_trace_csv
from .cad_library import CadDatabase, CadLoadError
from .config import PipelineConfig
from .contact_graph import ContactGraph, EntityKind, SceneEntity, build_graph
from .export import graph_to_urdf, save_graph
from .fusion import fuse_stream, load_stream
from .geometry import PlaneExtractParams, extract_planes, fit_oriented_box
from .matching import MatchCandidate, rank_candidates, write_matching_csv
from .meshio import MeshFormatError, read_mesh
from .validation import ValidationReport, validate_scene

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NO_DB = 2
EXIT_BAD_SCENE = 3


class SceneLoadError(RuntimeError):
    pass


def entity_seed(root_seed: int, entity_id: str) -> int:
    """Per-entity seed derived from the run seed; independent of processing order."""
    seq = np.random.SeedSequence([root_seed, zlib.crc32(entity_id.encode())])
    return int(seq.generate_state(1)[0])


def plane_params(cfg: PipelineConfig, entity_id: str) -> PlaneExtractParams:
    return PlaneExtractParams(inlier_tol=cfg.plane_inlier_tol, seed=entity_seed(cfg.seed, entity_id))


def load_entity_manifest(path: Path, cfg: PipelineConfig) -> list[SceneEntity]:
    doc = json.loads(path.read_text(encoding="utf-8"))
    gravity = doc.get("gravity", [0.0, 0.0, -1.0])
    if not np.allclose(gravity, [0.0, 0.0, -1.0]):
        raise SceneLoadError(f"unsupported gravity {gravity}; scenes must be z-up")
    entities = []
    for e in doc["entities"]:
        mesh = read_mesh(path.parent / e["mesh_path"]).cleaned()
        if mesh.is_empty:
            raise SceneLoadError(f"entity {e['id']} has an empty mesh")
        kind = EntityKind(e.get("kind", "RigidObject"))
        entities.append(SceneEntity(e["id"], e["class"], kind, mesh, fit_oriented_box(mesh),
                                    extract_planes(mesh, plane_params(cfg, e["id"]))))
    return entities


def load_scene(path, cfg: PipelineConfig) -> list[SceneEntity]:
    """Entity manifest (``entities``) or labelled frame stream (``frames``)."""
    path = Path(path)
    if path.is_dir():
        for name in ("scene.json", "stream.json"):
            if (path / name).is_file():
                path = path / name
                break
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        if "entities" in doc:
            return load_entity_manifest(path, cfg)
        if "frames" in doc:
            ents = fuse_stream(load_stream(path), plane_params=PlaneExtractParams(
                inlier_tol=cfg.plane_inlier_tol, seed=entity_seed(cfg.seed, "stream")))
            return ents
    except (OSError, ValueError, KeyError, MeshFormatError) as exc:
        raise SceneLoadError(f"cannot read scene {path}: {exc}") from exc
    raise SceneLoadError(f"{path} is neither an entity manifest nor a frame stream")


@dataclass
class EntityOutcome:
    entity_id: str
    shortlist: list[MatchCandidate] = field(default_factory=list)
    ranked: list[AlignmentResult] = field(default_factory=list)
    note: str = ""


_WORKER: dict = {}


def _init_worker(db, graph, cfg):
    _WORKER.update(db=db, graph=graph, cfg=cfg)


def _process_entity(entity_id: str) -> EntityOutcome:
    db: CadDatabase = _WORKER["db"]
    graph: ContactGraph = _WORKER["graph"]
    cfg: PipelineConfig = _WORKER["cfg"]
    return process_entity(graph, db, cfg, entity_id)


def process_entity(graph: ContactGraph, db: CadDatabase, cfg: PipelineConfig, entity_id: str) -> EntityOutcome:
    """Shortlist and align the CAD candidates for one object entity."""
    ent = graph.entities[entity_id]
    out = EntityOutcome(entity_id)
    out.shortlist = rank_candidates(ent, db, cfg.top_k, cfg.match_weights(), cfg.a_th)
    if not out.shortlist:
        out.note = "no CAD model of this class"
        return out
    edge = graph.parent_of(entity_id)
    support = None if edge is None or edge.floating or edge.plane is None else edge.plane
    out.ranked = align_shortlist(ent, out.shortlist, db, support, cfg.residual_weights(), cfg.lm_params())
    if all_diverged(out.ranked):
        out.note = "all candidates diverged; keeping scan mesh"
        out.ranked = []
    return out


@dataclass
class RunResult:
    exit_code: int
    graph: ContactGraph | None = None
    report: ValidationReport | None = None
    summary: dict | None = None


def run_pipeline(cfg: PipelineConfig) -> RunResult:
    t0 = time.perf_counter()
    out = Path(cfg.out)
    db_path = Path(cfg.cad_db) if cfg.cad_db else None
    if db_path is None or not (db_path / "manifest.json").is_file():
        logger.error("CAD database not found at %s", db_path)
        return RunResult(EXIT_NO_DB)
    try:
        db = CadDatabase.load(db_path)
    except (CadLoadError, OSError, ValueError, KeyError) as exc:
        logger.error("cannot load CAD database: %s", exc)
        return RunResult(EXIT_NO_DB)
    try:
        entities = load_scene(cfg.scene, cfg)
    except SceneLoadError as exc:
        logger.error("%s", exc)
        return RunResult(EXIT_BAD_SCENE)
    logger.info("loaded %d entities and %d CAD models", len(entities), len(db))

    graph = build_graph(entities, cfg.graph_params())
    object_ids = sorted(e.instance_id for e in graph.objects())
    if cfg.jobs > 1 and len(object_ids) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs, initializer=_init_worker,
                                 initargs=(db, graph, cfg)) as pool:
            outcomes = list(pool.map(_process_entity, object_ids))
    else:
        outcomes = [process_entity(graph, db, cfg, i) for i in object_ids]
    by_id = {o.entity_id: o for o in outcomes}

    ranked = {i: by_id[i].ranked for i in object_ids}
    graph, report = validate_scene(graph, ranked, db, cfg.validation_params())
    for ent_id, placement in graph.placements.items():
        if db.models[placement.model_id].is_articulated:
            graph.entities[ent_id].kind = EntityKind.ARTICULATED

    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    save_graph(graph, out / "contact_graph.json")
    graph_to_urdf(graph, out / "urdf", db, compat=cfg.urdf_compat, joint_table=cfg.joint_table)
    (out / "validation_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    if cfg.dump_matching:
        (out / "matching").mkdir(exist_ok=True)
        for o in outcomes:
            write_matching_csv(out / "matching" / f"{o.entity_id}.csv", o.shortlist)
    if cfg.trace_lm:
        (out / "lm_trace").mkdir(exist_ok=True)
        for o in outcomes:
            for r in o.ranked:
                c = r.candidate
                write_trace_csv(out / "lm_trace" / f"{o.entity_id}__{c.model_id}__{c.rotation_index}.csv", r)

    aes = [p.alignment_error for p in graph.placements.values()]
    in_db = [i for i in object_ids if by_id[i].shortlist]
    summary = {
        "entities": len(graph.non_root()),
        "objects": len(object_ids),
        "objects_with_db_class": len(in_db),
        "replaced": len(graph.placements),
        "mean_ae": (sum(aes) / len(aes)) if aes else None,
        "residual_conflicts": len(report.conflicts),
        "solved": report.solved,
        "notes": {o.entity_id: o.note for o in outcomes if o.note},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if not report.solved:
        logger.warning("scene emitted with %d unresolved conflict(s)", len(report.conflicts))
    runtime = time.perf_counter() - t0
    logger.info("replaced %d/%d objects in %.1f s", len(graph.placements), len(object_ids), runtime)
    return RunResult(EXIT_OK, graph, report, summary | {"runtime_s": runtime if math.isfinite(runtime) else None})
