"""HTTP facade over the engine: weight loading, analysis sweeps, segmentation.

One process holds at most one loaded weight set (plus optional text
embeddings) in app state; every endpoint is a thin adapter between the
request schema and the library call, with package errors mapped to JSON
bodies: config problems → 400, data problems → 422.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import ValidationError

from .. import __version__, container, diagnostics, imaging, segmentation
from ..container import TextEmbeddings, VitWeights
from ..engine import Engine
from ..errors import ConfigError, DataError, VitsegError
from ..segmentation import SlideConfig
from ..strategies import StrategyConfig
from . import schemas


@dataclass
class ModelState:
    weights: VitWeights | None = None
    text: TextEmbeddings | None = None
    text_checksum: str | None = None


def _require_weights(state: ModelState) -> VitWeights:
    if state.weights is None:
        raise ConfigError("no weights loaded; POST /weights/load first")
    return state.weights


def _require_text(state: ModelState) -> TextEmbeddings:
    if state.text is None:
        raise ConfigError("no text embeddings loaded; include them in /weights/load")
    return state.text


def _resolve_strategy(data: dict, weights: VitWeights) -> StrategyConfig:
    # an empty config means plain inference, not the standard profile
    strategy = StrategyConfig.disabled() if not data else StrategyConfig.from_dict(data)
    strategy.validate_for_model(weights.config.layers)
    return strategy


def _fit_image(image: np.ndarray, cfg) -> np.ndarray:
    side = cfg.image_size
    if image.shape[:2] != (side, side):
        image = imaging.center_crop(imaging.resize_short_side(image, side), side)
    return np.ascontiguousarray(image, dtype=np.float32)


def _prepare_samples(samples: list[schemas.Sample], cfg, ignore_index: int,
                     workers: int):
    return diagnostics.map_samples(
        lambda s: diagnostics.load_labeled_sample(s.image, s.labels, cfg,
                                                  ignore_index),
        samples, workers)


def _outfile(path: str) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def create_app() -> FastAPI:
    app = FastAPI(title="vitseg service", version=__version__)
    state = ModelState()
    app.state.model = state

    @app.exception_handler(ConfigError)
    def config_error(request, exc):
        return JSONResponse(status_code=400,
                            content={"category": "config", "message": str(exc)})

    @app.exception_handler(DataError)
    def data_error(request, exc):
        return JSONResponse(status_code=422,
                            content={"category": "data", "message": str(exc)})

    @app.exception_handler(VitsegError)
    def internal_error(request, exc):
        return JSONResponse(status_code=500,
                            content={"category": "internal", "message": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__,
                                      weights_loaded=state.weights is not None,
                                      text_loaded=state.text is not None)

    @app.post("/weights/load", response_model=schemas.WeightsInfo)
    def load(req: schemas.LoadRequest):
        weights = container.load_weights(req.weights)
        text = None
        text_checksum = None
        if req.text is not None:
            text = container.load_text_embeddings(
                req.text, projection_dim=weights.config.projection_dim)
            text_checksum = container.payload_crc(req.text)
        state.weights = weights
        state.text = text
        state.text_checksum = text_checksum
        return weights_info()

    @app.get("/weights", response_model=schemas.WeightsInfo)
    def weights_info():
        if state.weights is None:
            return schemas.WeightsInfo(loaded=False)
        return schemas.WeightsInfo(
            loaded=True,
            config=container.config_dict(state.weights.config),
            checksum=state.weights.checksum,
            text_checksum=state.text_checksum,
            class_names=list(state.text.class_names) if state.text else None,
        )

    @app.post("/config/validate", response_model=schemas.ValidateConfigResponse)
    def validate_config(req: schemas.ValidateConfigRequest):
        strategy = (StrategyConfig.disabled() if not req.config
                    else StrategyConfig.from_dict(req.config))
        if state.weights is not None:
            strategy.validate_for_model(state.weights.config.layers)
        return schemas.ValidateConfigResponse(resolved=strategy.model_dump())

    @app.post("/segment", response_model=schemas.SegmentResponse)
    def segment(req: schemas.SegmentRequest):
        weights = _require_weights(state)
        text = _require_text(state)
        strategy = _resolve_strategy(req.config, weights)
        try:
            slide = SlideConfig(**req.slide)
        except ValidationError as exc:
            raise ConfigError(f"invalid slide config: {exc}") from exc
        image = imaging.load_image(req.image)
        result = segmentation.slide_segment(
            image, Engine(weights), strategy, text, slide)
        out = _outfile(req.out)
        imaging.save_label_map(out, result.labels)
        return schemas.SegmentResponse(out=str(out),
                                       height=result.labels.shape[0],
                                       width=result.labels.shape[1],
                                       num_classes=result.num_classes)

    @app.post("/analyze/layers", response_model=schemas.AnalyzeLayersResponse)
    def analyze_layers(req: schemas.AnalyzeLayersRequest):
        weights = _require_weights(state)
        text = _require_text(state)
        if not req.samples:
            raise DataError("no samples given")
        prepared = _prepare_samples(req.samples, weights.config,
                                    req.ignore_index, req.workers)
        report = diagnostics.layer_sweep(prepared, weights, text,
                                         workers=req.workers)
        out = _outfile(req.out)
        diagnostics.write_layer_csv(out, report)
        rows = [schemas.LayerRow(layer=layer, auc=report.layer_auc[layer],
                                 alignment=report.layer_alignment[layer])
                for layer in sorted(report.layer_auc)]
        return schemas.AnalyzeLayersResponse(out=str(out), rows=rows,
                                             sample_count=report.sample_count)

    @app.post("/analyze/heads", response_model=schemas.AnalyzeHeadsResponse)
    def analyze_heads(req: schemas.AnalyzeHeadsRequest):
        weights = _require_weights(state)
        if not req.samples:
            raise DataError("no samples given")
        prepared = _prepare_samples(req.samples, weights.config,
                                    req.ignore_index, req.workers)
        scores = diagnostics.rank_heads(prepared, weights,
                                        datasets=[s.dataset for s in req.samples],
                                        workers=req.workers)
        out = _outfile(req.out)
        ranking_out = _outfile(req.ranking_out)
        diagnostics.write_head_csv(out, scores)
        diagnostics.write_ranking(ranking_out, scores)
        ranking = [schemas.HeadRow(layer=s.layer, head=s.head, mean_auc=s.mean_auc)
                   for s in scores]
        return schemas.AnalyzeHeadsResponse(out=str(out),
                                            ranking_out=str(ranking_out),
                                            ranking=ranking)

    @app.post("/hoyer", response_model=schemas.HoyerResponse)
    def hoyer(req: schemas.HoyerRequest):
        weights = _require_weights(state)
        image = _fit_image(imaging.load_image(req.image), weights.config)
        rows = diagnostics.hoyer_map(image, weights)
        out = _outfile(req.out)
        diagnostics.write_hoyer_csv(out, rows)
        side = weights.config.image_size // weights.config.patch_size
        return schemas.HoyerResponse(out=str(out), layers=weights.config.layers,
                                     grid=(side, side))

    @app.post("/eval", response_model=schemas.EvalResponse)
    def evaluate(req: schemas.EvalRequest):
        if not req.pairs:
            raise DataError("no prediction/ground-truth pairs given")
        loaded = diagnostics.map_samples(
            lambda p: (imaging.load_label_map(p.pred), imaging.load_label_map(p.gt)),
            req.pairs, req.workers)
        if req.class_names is not None:
            num_classes = len(req.class_names)
        else:
            top = 0
            for pred, gt in loaded:
                for arr in (pred, gt):
                    keep = arr[arr != req.ignore_index]
                    if keep.size:
                        top = max(top, int(keep.max()))
            num_classes = top + 1
        metrics = [segmentation.miou(
                       segmentation.ClassMap(labels=pred, num_classes=num_classes),
                       segmentation.ClassMap(labels=gt, num_classes=num_classes),
                       ignore_index=req.ignore_index,
                       class_names=req.class_names)
                   for pred, gt in loaded]
        merged = segmentation.merge_counts(metrics)
        out = _outfile(req.out)
        segmentation.write_metrics_csv(out, merged)
        return schemas.EvalResponse(out=str(out), miou=merged.miou,
                                    valid_pixels=merged.valid_pixels,
                                    pair_count=len(req.pairs))

    @app.post("/rank-export", response_model=schemas.RankExportResponse)
    def rank_export(req: schemas.RankExportRequest):
        scores = _scores_from_head_csv(req.head_csv)
        if req.top is not None:
            if req.top < 1:
                raise ConfigError(f"top must be ≥ 1, got {req.top}")
            scores = scores[: req.top]
        out = _outfile(req.out)
        diagnostics.write_ranking(out, scores)
        heads = [schemas.HeadRow(layer=s.layer, head=s.head, mean_auc=s.mean_auc)
                 for s in scores]
        return schemas.RankExportResponse(out=str(out), heads=heads)

    return app


def _scores_from_head_csv(path) -> list[diagnostics.HeadScore]:
    """Rebuild the head ranking from a head_auc.csv: mean over dataset rows
    per head, descending, ties by (layer, head) ascending."""
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise DataError(f"cannot read head table {path}: {exc}") from exc
    if not rows or rows[0] != ["layer", "head", "dataset", "auc"]:
        raise DataError(f"{path} is not a head AUC table")
    by_head: dict[tuple[int, int], dict[str, float]] = {}
    for line, row in enumerate(rows[1:], start=2):
        try:
            layer, head, dataset, auc = int(row[0]), int(row[1]), row[2], float(row[3])
        except (IndexError, ValueError) as exc:
            raise DataError(f"{path}:{line}: malformed row {row}") from exc
        by_head.setdefault((layer, head), {})[dataset] = auc
    if not by_head:
        raise DataError(f"{path} holds no head rows")
    scores = [diagnostics.HeadScore(
                  layer=key[0], head=key[1],
                  mean_auc=float(np.mean([v for _, v in sorted(tags.items())])),
                  per_dataset=tuple(sorted(tags.items())))
              for key, tags in by_head.items()]
    scores.sort(key=lambda s: (-s.mean_auc, s.layer, s.head))
    return scores


app = create_app()
