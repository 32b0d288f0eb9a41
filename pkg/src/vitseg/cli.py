"""Command-line client for the analysis/segmentation service.

Every subcommand talks HTTP: against ``--server URL`` if given, otherwise
against an in-process instance of the service app, so the CLI and a deployed
service expose exactly the same behavior. Paths given to subcommands must be
visible to whichever process serves the request.

Each successful run writes ``run_manifest.json`` into ``--out-dir`` recording
the subcommand, resolved strategy config, weight checksums, sample list,
output paths, seed, and wall time.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import asyncio
import json
import random
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import click
import httpx

from . import __version__
from .errors import ConfigError, DataError, VitsegError

EXIT_CONFIG = 2
EXIT_DATA = 3


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    raise SystemExit(code)


@dataclass
class Session:
    weights: str | None
    text: str | None
    config_path: str | None
    server: str | None
    threads: int
    seed: int
    out_dir: Path
    started: float = field(default_factory=time.monotonic)
    _app: object = None
    weight_info: dict = field(default_factory=dict)
    resolved_config: dict | None = None

    # -- transport ---------------------------------------------------------

    def call(self, method: str, path: str, payload: dict | None = None) -> dict:
        if self.server:
            with httpx.Client(base_url=self.server, timeout=None) as client:
                response = client.request(method, path, json=payload)
        else:
            if self._app is None:
                from .service import create_app
                self._app = create_app()

            async def go():
                transport = httpx.ASGITransport(app=self._app)
                async with httpx.AsyncClient(transport=transport,
                                             base_url="http://vitseg",
                                             timeout=None) as client:
                    return await client.request(method, path, json=payload)

            response = asyncio.run(go())
        if response.status_code >= 400:
            try:
                body = response.json()
            except ValueError:
                body = {}
            category = body.get("category", "internal")
            message = body.get("message", response.text)
            code = {"config": EXIT_CONFIG, "data": EXIT_DATA}.get(category, 1)
            _fail(message, code)
        return response.json()

    # -- shared steps ------------------------------------------------------

    def ensure_loaded(self, need_text: bool = False) -> dict:
        if self.weights:
            payload = {"weights": self.weights}
            if self.text:
                payload["text"] = self.text
            info = self.call("POST", "/weights/load", payload)
        else:
            info = self.call("GET", "/weights")
            if not info.get("loaded"):
                _fail("no weights loaded; pass --weights", EXIT_CONFIG)
        if need_text and not info.get("class_names"):
            _fail("this subcommand needs text embeddings; pass --text", EXIT_CONFIG)
        self.weight_info = info
        return info

    def strategy_dict(self) -> dict:
        if self.config_path is None:
            return {}
        try:
            data = json.loads(Path(self.config_path).read_text())
        except OSError as exc:
            _fail(f"cannot read config {self.config_path}: {exc}", EXIT_CONFIG)
        except json.JSONDecodeError as exc:
            _fail(f"config {self.config_path} is not valid JSON: {exc}", EXIT_CONFIG)
        if not isinstance(data, dict):
            _fail(f"config {self.config_path} must hold a JSON object", EXIT_CONFIG)
        self.resolved_config = self.call(
            "POST", "/config/validate", {"config": data})["resolved"]
        return data

    def out_path(self, default_name: str, override: str | None) -> str:
        if override:
            return override
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return str(self.out_dir / default_name)

    def finish(self, subcommand: str, outputs: list[str],
               samples: list | None = None, extra: dict | None = None):
        if not self.server:
            missing = [o for o in outputs if not Path(o).exists()]
            if missing:
                _fail(f"outputs missing after run: {missing}", 1)
        manifest = {
            "subcommand": subcommand,
            "version": __version__,
            "config": self.resolved_config,
            "weights": {
                "checksum": self.weight_info.get("checksum"),
                "text_checksum": self.weight_info.get("text_checksum"),
            },
            "samples": samples or [],
            "outputs": outputs,
            "seed": self.seed,
            "threads": self.threads,
            "wall_time_s": round(time.monotonic() - self.started, 3),
        }
        if extra:
            manifest.update(extra)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "run_manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        click.echo(f"manifest: {path}")


pass_session = click.make_pass_decorator(Session)


def read_sample_list(path) -> list[dict]:
    """Sample lists are explicit: one 'image labels [dataset]' line each."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read sample list {path}: {exc}") from exc
    records = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise DataError(
                f"{path}:{lineno}: expected 'image labels [dataset]', got {raw!r}")
        record = {"image": parts[0], "labels": parts[1]}
        if len(parts) == 3:
            record["dataset"] = parts[2]
        records.append(record)
    if not records:
        raise DataError(f"sample list {path} is empty")
    return records


def subsample(records: list[dict], limit: int | None, seed: int) -> list[dict]:
    if limit is None or limit >= len(records):
        return records
    if limit < 1:
        raise ConfigError(f"--limit must be ≥ 1, got {limit}")
    picked = sorted(random.Random(seed).sample(range(len(records)), limit))
    return [records[i] for i in picked]


def guarded(fn):
    """Map library errors raised client-side onto the CLI exit codes."""
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(str(exc), EXIT_CONFIG)
        except VitsegError as exc:
            _fail(str(exc), EXIT_DATA)
    return wrapper


@click.group()
@click.version_option(__version__)
@click.option("--weights", type=click.Path(), help="Weight container (.lhtw).")
@click.option("--text", type=click.Path(), help="Text-embedding container (.lhtw).")
@click.option("--config", "config_path", type=click.Path(),
              help="Strategy config JSON.")
@click.option("--server", help="Base URL of a running service; default in-process.")
@click.option("--threads", default=1, show_default=True,
              help="Worker threads over samples.")
@click.option("--seed", default=0, show_default=True,
              help="Seed for sample subsetting.")
@click.option("--out-dir", default=".", show_default=True, type=click.Path())
@click.pass_context
def main(ctx, weights, text, config_path, server, threads, seed, out_dir):
    """Analysis and open-vocabulary segmentation for CLIP vision transformers."""
    ctx.obj = Session(weights=weights, text=text, config_path=config_path,
                      server=server, threads=threads, seed=seed,
                      out_dir=Path(out_dir))


@main.command("analyze-layers")
@click.option("--samples", "samples_path", required=True, type=click.Path())
@click.option("--limit", type=int, default=None,
              help="Seeded random subset of the sample list.")
@click.option("--out", "out", type=click.Path(), default=None)
@pass_session
@guarded
def analyze_layers(session: Session, samples_path, limit, out):
    """Per-layer discriminability and alignment table (final layer excluded)."""
    session.ensure_loaded(need_text=True)
    records = subsample(read_sample_list(samples_path), limit, session.seed)
    out = session.out_path("layer_auc.csv", out)
    result = session.call("POST", "/analyze/layers", {
        "samples": records, "out": out, "workers": session.threads})
    click.echo(f"{result['sample_count']} samples, "
               f"{len(result['rows'])} layers -> {result['out']}")
    session.finish("analyze-layers", [result["out"]], samples=records,
                   extra={"sample_list": str(samples_path), "limit": limit})


@main.command("analyze-heads")
@click.option("--samples", "samples_path", required=True, type=click.Path())
@click.option("--limit", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--ranking-out", type=click.Path(), default=None)
@pass_session
@guarded
def analyze_heads(session: Session, samples_path, limit, out, ranking_out):
    """Per-head discriminability table plus a descending-mean ranking file."""
    session.ensure_loaded()
    records = subsample(read_sample_list(samples_path), limit, session.seed)
    out = session.out_path("head_auc.csv", out)
    ranking_out = session.out_path("ranking.json", ranking_out)
    result = session.call("POST", "/analyze/heads", {
        "samples": records, "out": out, "ranking_out": ranking_out,
        "workers": session.threads})
    best = result["ranking"][0]
    click.echo(f"{len(result['ranking'])} heads ranked; "
               f"best (layer {best['layer']}, head {best['head']}) "
               f"auc {best['mean_auc']:.4f} -> {result['out']}")
    session.finish("analyze-heads", [result["out"], result["ranking_out"]],
                   samples=records,
                   extra={"sample_list": str(samples_path), "limit": limit})


@main.command("hoyer")
@click.option("--image", required=True, type=click.Path())
@click.option("--out", type=click.Path(), default=None)
@pass_session
@guarded
def hoyer(session: Session, image, out):
    """Per-layer, per-position sparsity-score map for one image."""
    session.ensure_loaded()
    out = session.out_path("hoyer_map.csv", out)
    result = session.call("POST", "/hoyer", {"image": image, "out": out})
    click.echo(f"{result['layers']} layers x {result['grid'][0]}x{result['grid'][1]} "
               f"grid -> {result['out']}")
    session.finish("hoyer", [result["out"]], samples=[{"image": image}])


@main.command("segment")
@click.option("--image", required=True, type=click.Path())
@click.option("--out", type=click.Path(), default=None)
@click.option("--short-side", default=336, show_default=True)
@click.option("--crop", default=224, show_default=True)
@click.option("--stride", default=112, show_default=True)
@pass_session
@guarded
def segment(session: Session, image, out, short_side, crop, stride):
    """Sliding-window segmentation of one image into a class-index map."""
    session.ensure_loaded(need_text=True)
    strategy = session.strategy_dict()
    out = session.out_path("map.png", out)
    result = session.call("POST", "/segment", {
        "image": image, "out": out, "config": strategy,
        "slide": {"short_side": short_side, "crop": crop, "stride": stride}})
    click.echo(f"{result['height']}x{result['width']} map, "
               f"{result['num_classes']} classes -> {result['out']}")
    session.finish("segment", [result["out"]], samples=[{"image": image}])


@main.command("eval")
@click.option("--pred-dir", required=True, type=click.Path())
@click.option("--gt-dir", required=True, type=click.Path())
@click.option("--classes", "classes_path", type=click.Path(), default=None,
              help="Class-name file, one per line.")
@click.option("--ignore", default=255, show_default=True)
@click.option("--out", type=click.Path(), default=None)
@pass_session
@guarded
def evaluate(session: Session, pred_dir, gt_dir, classes_path, ignore, out):
    """Aggregate mIoU of a prediction directory against ground truth."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    if not pred_dir.is_dir():
        raise DataError(f"prediction directory not found: {pred_dir}")
    pairs = []
    for pred in sorted(p for p in pred_dir.iterdir() if p.is_file()):
        gt = gt_dir / pred.name
        if not gt.exists():
            raise DataError(f"no ground truth for {pred.name} in {gt_dir}")
        pairs.append({"pred": str(pred), "gt": str(gt)})
    if not pairs:
        raise DataError(f"no prediction files in {pred_dir}")
    class_names = None
    if classes_path:
        class_names = [line.strip() for line in
                       Path(classes_path).read_text().splitlines() if line.strip()]
    out = session.out_path("metrics.csv", out)
    result = session.call("POST", "/eval", {
        "pairs": pairs, "out": out, "class_names": class_names,
        "ignore_index": ignore, "workers": session.threads})
    click.echo(f"mIoU {result['miou']:.4f} over {result['pair_count']} maps "
               f"({result['valid_pixels']} px) -> {result['out']}")
    session.finish("eval", [result["out"]], samples=pairs,
                   extra={"miou": result["miou"]})


@main.command("rank-export")
@click.option("--head-csv", required=True, type=click.Path())
@click.option("--top", type=int, default=None,
              help="Keep only the best N heads.")
@click.option("--out", type=click.Path(), default=None)
@pass_session
@guarded
def rank_export(session: Session, head_csv, top, out):
    """Convert a head table into a ranking file usable as a strategy input."""
    out = session.out_path("ranking.json", out)
    result = session.call("POST", "/rank-export", {
        "head_csv": head_csv, "out": out, "top": top})
    click.echo(f"{len(result['heads'])} heads -> {result['out']}")
    session.finish("rank-export", [result["out"]],
                   extra={"head_csv": head_csv, "top": top})


if __name__ == "__main__":
    main()
