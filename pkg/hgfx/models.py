from pydantic import BaseModel


# --- Training ---


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float | None
    lr: float


class AblationRow(BaseModel):
    preset: str
    hetero_graph: bool
    adaptive_scan: bool
    hetero_learning: bool
    val_acc: float
    delta: float


class SweepRecord(BaseModel):
    param: str
    value: float
    preset: str
    seed: int
    val_acc: float


# --- Data ---


class DatasetSpec(BaseModel):
    root: str
    class_names: list[str]
    counts: list[int]
    val_fraction: float
    seed: int


# --- Exports ---


class ScanExport(BaseModel):
    order: list[int]
    tree_edges: list[list[int]]


class GraphExport(BaseModel):
    k: int
    dilation: int
    adj: list[list[int]]


# --- Verification ---


class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: str
    seconds: float


# --- Inference API ---


class ImageRequest(BaseModel):
    image: str  # base64 PPM, PGM or PNG


class PredictResponse(BaseModel):
    label: int
    class_name: str | None
    probabilities: list[float]


class ModelInfoResponse(BaseModel):
    ablation: str
    hetero_graph: bool
    adaptive_scan: bool
    hetero_learning: bool
    blocks: int
    n_nodes: int
    parameters: int
    parameters_mb: float
    class_names: list[str] | None
