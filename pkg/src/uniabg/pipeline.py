"""Two-stage pipeline orchestration, ablation rows and parameter sweeps.

Everything here is sequential; parallelism lives inside the modules. Report
dictionaries hold no timings so that a fixed seed reproduces them byte for
byte.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, TypeVar

import numpy as np

from . import apv as apv_mod
from .cluster import dbscan, export_labels, load_labels, num_clusters
from .config import PipelineConfig
from .errors import DatasetError, StageError, UniABGError
from .evalkit import association_accuracy, cluster_purity, retrieval_report, view_probe
from .feature_store import (
    EmbeddingSet, Manifest, ManifestEntry, ViewTag, read_manifest, read_vector_file, write_manifest,
)
from .hgfc import (
    AssociationMap, cosine_similarity_matrix, greedy_associate, hgfc_associate, load_association,
    save_association,
)
from .layers import (
    IDENTITY, DiscriminatorParams, EncoderParams, identity_encoder, init_models, load_checkpoint,
    save_checkpoint,
)
from .stage2 import PARAM_NAMES, Stage2Model, build_pairs, run_stage2
from .synthgen import generate, write_dataset
from .vaab import Stage1Output, run_stage1

log = logging.getLogger(__name__)

T = TypeVar("T")

HGFC, GREEDY = "hgfc", "greedy"
DRONE_TO_SAT, SAT_TO_DRONE = "drone->satellite", "satellite->drone"
SWEEP_K = (1, 2, 3, 4)
SWEEP_LAMBDA = tuple(round(0.1 * i, 1) for i in range(1, 11))

# ablation rows: (name, association method, keep the adversarial weight)
ABLATION_ROWS = (("B", GREEDY, False), ("B+HGFC", HGFC, False), ("B+HGFC+VAAB", HGFC, True))


@dataclass(frozen=True)
class Dataset:
    drone: EmbeddingSet
    satellite: EmbeddingSet
    apv: EmbeddingSet
    manifest: Manifest

    def truth(self) -> tuple[dict[str, int], np.ndarray, np.ndarray]:
        """Drone id -> class, drone classes, satellite classes (from the manifest)."""
        by_id = {e.id: e.class_id for e in self.manifest.entries}
        missing = [i for i in self.drone.ids + self.satellite.ids if by_id.get(i) is None]
        if missing:
            raise DatasetError(f"manifest lacks class_id for {missing[:3]}")
        d = np.array([by_id[i] for i in self.drone.ids], dtype=np.int64)
        s = np.array([by_id[i] for i in self.satellite.ids], dtype=np.int64)
        return dict(zip(self.drone.ids, d.tolist())), d, s


def load_dataset(data_dir: str | os.PathLike) -> Dataset:
    """Read ``drone.uvf``, ``satellite.uvf``, ``apv.uvf`` with ids from ``manifest.json``."""
    root = Path(data_dir)
    if not (root / "manifest.json").is_file():
        raise DatasetError(f"no manifest.json in {root} (run `uniabg synth` first)")
    manifest = read_manifest(root / "manifest.json")
    sets = {}
    for view, name in ((ViewTag.DRONE, "drone"), (ViewTag.SATELLITE, "satellite"), (ViewTag.APV, "apv")):
        path = root / f"{name}.uvf"
        if not path.is_file():
            raise DatasetError(f"missing feature file {path}")
        sets[view] = read_vector_file(path, manifest.ids(view), view)
    return Dataset(sets[ViewTag.DRONE], sets[ViewTag.SATELLITE], sets[ViewTag.APV], manifest)


def synthetic_dataset(cfg: PipelineConfig) -> Dataset:
    ds = generate(cfg.synth_config())
    return Dataset(ds.drone, ds.satellite, ds.apv, ds.manifest)


def _staged(stage: str, fn: Callable[[], T]) -> T:
    try:
        return fn()
    except StageError:
        raise
    except UniABGError as exc:
        raise StageError(stage, str(exc)) from exc


def _encode(enc: EncoderParams, s: EmbeddingSet) -> EmbeddingSet:
    return EmbeddingSet(enc.encode(np.asarray(s.vectors, dtype=np.float64)), s.ids, s.view)


# -- stages -------------------------------------------------------------------


def stage1(data: Dataset, cfg: PipelineConfig, lam: Optional[float] = None) -> Stage1Output:
    s1 = cfg.stage1_config()
    if lam is not None:
        s1 = replace(s1, lam=lam)
    enc, disc = init_models(data.drone.dim, s1.dim_out, s1.hidden, s1.seed)
    if cfg.model.encoder_init == IDENTITY:
        enc = identity_encoder(data.drone.dim, s1.dim_out)
    return _staged("stage1", lambda: run_stage1(data.drone, data.satellite, data.apv, s1, (enc, disc)))


@dataclass
class AssociationResult:
    assoc: AssociationMap
    drone_labels: np.ndarray
    sat_labels: np.ndarray


def associate(
    data: Dataset, encoder: EncoderParams, cfg: PipelineConfig, method: str = HGFC,
    k: Optional[int] = None,
) -> AssociationResult:
    """Re-extract embeddings, re-cluster both views and associate drones with satellite clusters."""

    def run() -> AssociationResult:
        d, s, p = (_encode(encoder, x) for x in (data.drone, data.satellite, data.apv))
        ld = dbscan(d, cfg.dbscan.eps, cfg.dbscan.min_samples)
        ls = dbscan(s, cfg.dbscan.eps, cfg.dbscan.satellite_min_samples)
        if num_clusters(ls) == 0:
            raise StageError("associate", "satellite clustering produced zero clusters")
        if method == HGFC:
            assoc = hgfc_associate(
                d.vectors, p.vectors, s.vectors, ld, ls,
                k=cfg.hgfc.k if k is None else k, threshold=cfg.hgfc.consist_threshold,
                mode=cfg.hgfc.vote_mode, drone_ids=d.ids, sat_ids=s.ids,
            )
        elif method == GREEDY:
            assoc = greedy_associate(cosine_similarity_matrix(d, s), ls, d.ids, s.ids)
        else:
            raise ValueError(f"unknown association method {method!r}")
        return AssociationResult(assoc, ld, ls)

    return _staged("associate", run)


def stage2(data: Dataset, encoder: EncoderParams, ar: AssociationResult, cfg: PipelineConfig) -> Stage2Model:
    def run() -> Stage2Model:
        pairs = build_pairs(ar.assoc, data.drone, data.satellite, ar.sat_labels)
        return run_stage2(pairs, encoder, cfg.seed, cfg.stage2_config())

    return _staged("stage2", run)


def evaluate(data: Dataset, encoder: EncoderParams) -> dict[str, dict]:
    _, d_cls, s_cls = data.truth()
    d = encoder.encode(np.asarray(data.drone.vectors, dtype=np.float64))
    s = encoder.encode(np.asarray(data.satellite.vectors, dtype=np.float64))
    return {
        DRONE_TO_SAT: retrieval_report(d, s, d_cls, s_cls, DRONE_TO_SAT),
        SAT_TO_DRONE: retrieval_report(s, d, s_cls, d_cls, SAT_TO_DRONE),
    }


@dataclass
class VariantRun:
    row: dict
    stage1: Stage1Output
    association: AssociationResult
    model: Stage2Model


def run_variant(
    data: Dataset, cfg: PipelineConfig, method: str = HGFC, lam: Optional[float] = None,
    k: Optional[int] = None, on_stage1: Optional[Callable[[Stage1Output], None]] = None,
) -> VariantRun:
    """Stage 1, re-clustering, association, stage 2 and metrics for one configuration.

    ``on_stage1`` sees the stage-1 output before the later stages run.
    """
    lam = cfg.lam if lam is None else lam
    drone_truth, d_cls, s_cls = data.truth()
    s1 = stage1(data, cfg, lam)
    if on_stage1 is not None:
        on_stage1(s1)
    ar = associate(data, s1.encoder, cfg, method, k)
    model = stage2(data, s1.encoder, ar, cfg)
    probe = view_probe([_encode(s1.encoder, x) for x in (data.drone, data.satellite, data.apv)], cfg.seed)
    row = {
        "association": method,
        "lambda": lam,
        "k": cfg.hgfc.k if k is None else k,
        "association_accuracy": association_accuracy(ar.assoc, drone_truth, ar.sat_labels, s_cls),
        "purity": {
            "drone": cluster_purity(ar.drone_labels, d_cls),
            "satellite": cluster_purity(ar.sat_labels, s_cls),
        },
        "clusters": {"drone": num_clusters(ar.drone_labels), "satellite": num_clusters(ar.sat_labels)},
        "probe_accuracy": probe,
        "stage1_retrieval": evaluate(data, s1.encoder),
        "retrieval": evaluate(data, model.encoder),
    }
    return VariantRun(row, s1, ar, model)


def _checkpoint_tensors(encoder: EncoderParams, disc: DiscriminatorParams) -> dict[str, np.ndarray]:
    out = {"enc_w": encoder.weight, "enc_b": encoder.bias}
    out.update({f"disc_{n}": v for n, v in disc.blocks().items()})
    return out


def _meta(stage: str, cfg: PipelineConfig, epochs: int) -> dict:
    return {"stage": stage, "seed": cfg.seed, "epoch": epochs, "config": cfg.to_dict()}


def save_stage1(path: str | os.PathLike, s1: Stage1Output, cfg: PipelineConfig) -> None:
    save_checkpoint(path, _checkpoint_tensors(s1.encoder, s1.discriminator), _meta("stage1", cfg, cfg.stage1.epochs))


def load_encoder(path: str | os.PathLike) -> EncoderParams:
    tensors, _ = load_checkpoint(path)
    try:
        return EncoderParams(tensors["enc_w"], tensors["enc_b"])
    except KeyError as exc:
        raise DatasetError(f"checkpoint {path} has no encoder tensors") from exc


def save_stage2(path: str | os.PathLike, model: Stage2Model, cfg: PipelineConfig) -> None:
    meta = _meta("stage2", cfg, cfg.stage2.epochs)
    meta["num_classes"] = model.num_classes
    save_checkpoint(path, model.params(), meta)


def load_stage2(path: str | os.PathLike) -> Stage2Model:
    tensors, _ = load_checkpoint(path)
    missing = [n for n in PARAM_NAMES if n not in tensors]
    if missing:
        raise DatasetError(f"checkpoint {path} lacks {missing}")
    return Stage2Model.from_params(tensors)


def dump_json(obj, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# -- commands -----------------------------------------------------------------


def cmd_synth(cfg: PipelineConfig, out_dir: str | os.PathLike) -> dict[str, str]:
    ds = generate(cfg.synth_config())
    paths = write_dataset(ds, out_dir)
    log.info("synth: %d drone, %d satellite, %d apv rows -> %s",
             ds.drone.count, ds.satellite.count, ds.apv.count, out_dir)
    return paths


@dataclass
class ApvSummary:
    written: list[str]
    failures: dict[str, str]


def cmd_apv(manifest_path: str | os.PathLike, out_dir: str | os.PathLike) -> ApvSummary:
    """Recolour every drone image with pooled satellite statistics.

    Images are resolved relative to the manifest's directory. Each output is
    ``<drone id>#apv.ppm`` in ``out_dir``; the extended manifest is written
    there too, with image paths relative to it. Unreadable images are
    collected per file.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(manifest_path)
    failures: dict[str, str] = {}

    def load(e: ManifestEntry):
        if e.image_path is None:
            failures[e.id] = "no image_path"
            return None
        try:
            return apv_mod.read_ppm(root / e.image_path)
        except (OSError, ValueError) as exc:
            failures[e.id] = str(exc)
            return None

    drones = manifest.by_view(ViewTag.DRONE)
    written: list[str] = []
    if not drones:
        return ApvSummary(written, failures)
    sats = [im for im in (load(e) for e in manifest.by_view(ViewTag.SATELLITE)) if im is not None]
    if not sats:
        failures.setdefault("<satellite>", "no readable satellite image for target statistics")
        return ApvSummary(written, failures)
    target = apv_mod.global_stats(sats)
    produced: dict[str, ManifestEntry] = {}
    for e in drones:
        im = load(e)
        if im is None:
            continue
        pid = f"{e.id}#apv"
        name = f"{pid}.ppm"
        apv_mod.write_ppm(apv_mod.color_transfer(im, target), out / name)
        written.append(pid)
        produced[pid] = ManifestEntry(pid, ViewTag.APV, name, e.class_id)

    def rebased(e: ManifestEntry) -> ManifestEntry:
        if e.image_path is None:
            return e
        return replace(e, image_path=Path(os.path.relpath(root / e.image_path, out)).as_posix())

    # image paths of the written manifest are relative to ``out_dir``; existing
    # pseudo-view records are replaced in place, new ones appended
    kept = [produced.pop(e.id, None) or rebased(e) for e in manifest.entries]
    write_manifest(Manifest(kept + list(produced.values())), out / "manifest.json")
    return ApvSummary(written, failures)


def pipeline_report(data: Dataset, cfg: PipelineConfig, ablation: bool = False,
                    out_dir: Optional[str | os.PathLike] = None) -> dict:
    """Full run; with ``ablation`` also the greedy and no-adversarial rows."""
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    # stage 1 is checkpointed first so a later stage failure leaves it on disk
    keep = None if out is None else (lambda s1: save_stage1(out / "stage1.uck", s1, cfg))
    full = run_variant(data, cfg, HGFC, cfg.lam, on_stage1=keep)
    if out is not None:
        export_labels(data.drone.ids, full.association.drone_labels, out / "drone_labels.json")
        export_labels(data.satellite.ids, full.association.sat_labels, out / "satellite_labels.json")
        save_association(full.association.assoc, out / "association.json")
        save_stage2(out / "stage2.uck", full.model, cfg)
    raw_probe = view_probe([data.drone, data.satellite, data.apv], cfg.seed)
    report = {
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "raw_probe_accuracy": raw_probe,
        "result": full.row,
    }
    if ablation:
        rows = []
        for name, method, adversarial in ABLATION_ROWS:
            if method == HGFC and adversarial:
                row = full.row
            else:
                row = run_variant(data, cfg, method, cfg.lam if adversarial else 0.0).row
            rows.append({"name": name, **row})
        report["ablation"] = rows
    return report


def cmd_pipeline(cfg: PipelineConfig, out_dir: str | os.PathLike, ablation: bool = False,
                 data: Optional[Dataset] = None) -> dict:
    data = load_dataset(cfg.paths.data_dir) if data is None else data
    report = pipeline_report(data, cfg, ablation, out_dir)
    dump_json(report, Path(out_dir) / "report.json")
    return report


def sweep_rows(data: Dataset, cfg: PipelineConfig, parameter: str) -> list[dict]:
    """One full pipeline run per value of ``k`` (1..4) or ``lambda`` (0.1..1.0)."""
    if parameter == "k":
        runs = [(v, run_variant(data, cfg, HGFC, k=v)) for v in SWEEP_K]
    elif parameter == "lambda":
        runs = [(v, run_variant(data, cfg, HGFC, lam=v)) for v in SWEEP_LAMBDA]
    else:
        raise ValueError(f"unknown sweep parameter {parameter!r}")
    rows = []
    for v, run in runs:
        r = run.row["retrieval"]
        rows.append({
            parameter: v,
            "d2s_R@1": r[DRONE_TO_SAT]["R@1"], "d2s_AP": r[DRONE_TO_SAT]["AP"],
            "s2d_R@1": r[SAT_TO_DRONE]["R@1"], "s2d_AP": r[SAT_TO_DRONE]["AP"],
        })
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def cmd_sweep(cfg: PipelineConfig, parameter: str, out_dir: str | os.PathLike,
              data: Optional[Dataset] = None) -> dict:
    data = load_dataset(cfg.paths.data_dir) if data is None else data
    rows = sweep_rows(data, cfg, parameter)
    r1 = [r["d2s_R@1"] for r in rows]
    table = {
        "parameter": parameter,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "rows": rows,
        "d2s_R@1_spread": max(r1) - min(r1),
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(table, out / f"sweep_{parameter}.json")
    (out / f"sweep_{parameter}.csv").write_text(sweep_csv(rows), encoding="utf-8")
    return table


# step-wise commands, communicating through files in ``out_dir``


def cmd_stage1(cfg: PipelineConfig, out_dir: str | os.PathLike) -> Stage1Output:
    data = load_dataset(cfg.paths.data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s1 = stage1(data, cfg)
    save_stage1(out / "stage1.uck", s1, cfg)
    dump_json(s1.loss_trace, out / "stage1_trace.json")
    return s1


def cmd_associate(cfg: PipelineConfig, out_dir: str | os.PathLike, method: str = HGFC) -> AssociationResult:
    data = load_dataset(cfg.paths.data_dir)
    out = Path(out_dir)
    ar = associate(data, load_encoder(out / "stage1.uck"), cfg, method)
    export_labels(data.drone.ids, ar.drone_labels, out / "drone_labels.json")
    export_labels(data.satellite.ids, ar.sat_labels, out / "satellite_labels.json")
    save_association(ar.assoc, out / "association.json")
    return ar


def cmd_stage2(cfg: PipelineConfig, out_dir: str | os.PathLike) -> Stage2Model:
    data = load_dataset(cfg.paths.data_dir)
    out = Path(out_dir)
    enc = load_encoder(out / "stage1.uck")
    ar = AssociationResult(
        load_association(out / "association.json"),
        load_labels(out / "drone_labels.json", data.drone.ids),
        load_labels(out / "satellite_labels.json", data.satellite.ids),
    )
    model = stage2(data, enc, ar, cfg)
    save_stage2(out / "stage2.uck", model, cfg)
    return model


def cmd_eval(cfg: PipelineConfig, out_dir: str | os.PathLike) -> dict:
    """Retrieval metrics of the newest checkpoint in ``out_dir`` (stage 2, else stage 1)."""
    data = load_dataset(cfg.paths.data_dir)
    out = Path(out_dir)
    if (out / "stage2.uck").is_file():
        enc, source = load_stage2(out / "stage2.uck").encoder, "stage2"
    elif (out / "stage1.uck").is_file():
        enc, source = load_encoder(out / "stage1.uck"), "stage1"
    else:
        raise DatasetError(f"no checkpoint in {out}")
    report = {"seed": cfg.seed, "config": cfg.to_dict(), "checkpoint": source,
              "retrieval": evaluate(data, enc)}
    dump_json(report, out / "eval.json")
    return report


def with_overrides(cfg: PipelineConfig, **kw) -> PipelineConfig:
    out = copy.deepcopy(cfg)
    for key, value in kw.items():
        if value is None:
            continue
        section, _, name = key.rpartition(".")
        setattr(getattr(out, section) if section else out, name, value)
    return out
