"""Request/response bodies for the HTTP service.

The service works on server-local file paths: requests name input files and
where to write artifacts, responses echo what was produced. The CLI runs the
app in-process by default, so "server-local" normally means "this machine".
"""

from pydantic import BaseModel


class HealthResponse(BaseModel):
    status: str
    version: str
    weights_loaded: bool
    text_loaded: bool


class LoadRequest(BaseModel):
    weights: str
    text: str | None = None


class WeightsInfo(BaseModel):
    loaded: bool
    config: dict | None = None
    checksum: str | None = None
    text_checksum: str | None = None
    class_names: list[str] | None = None


class ValidateConfigRequest(BaseModel):
    config: dict = {}


class ValidateConfigResponse(BaseModel):
    resolved: dict


class SegmentRequest(BaseModel):
    image: str
    out: str
    config: dict = {}
    slide: dict = {}


class SegmentResponse(BaseModel):
    out: str
    height: int
    width: int
    num_classes: int


class Sample(BaseModel):
    image: str
    labels: str
    dataset: str = "default"


class AnalyzeLayersRequest(BaseModel):
    samples: list[Sample]
    out: str
    ignore_index: int = 255
    workers: int = 1


class LayerRow(BaseModel):
    layer: int
    auc: float
    alignment: float


class AnalyzeLayersResponse(BaseModel):
    out: str
    rows: list[LayerRow]
    sample_count: int


class AnalyzeHeadsRequest(BaseModel):
    samples: list[Sample]
    out: str
    ranking_out: str
    ignore_index: int = 255
    workers: int = 1


class HeadRow(BaseModel):
    layer: int
    head: int
    mean_auc: float


class AnalyzeHeadsResponse(BaseModel):
    out: str
    ranking_out: str
    ranking: list[HeadRow]


class HoyerRequest(BaseModel):
    image: str
    out: str


class HoyerResponse(BaseModel):
    out: str
    layers: int
    grid: tuple[int, int]


class EvalPair(BaseModel):
    pred: str
    gt: str


class EvalRequest(BaseModel):
    pairs: list[EvalPair]
    out: str
    class_names: list[str] | None = None
    ignore_index: int = 255
    workers: int = 1


class EvalResponse(BaseModel):
    out: str
    miou: float
    valid_pixels: int
    pair_count: int


class RankExportRequest(BaseModel):
    head_csv: str
    out: str
    top: int | None = None


class RankExportResponse(BaseModel):
    out: str
    heads: list[HeadRow]


class ErrorBody(BaseModel):
    category: str
    message: str
