import logging
from dataclasses import dataclass
from pathlib import Path

from hgfx.checkpoint import load_checkpoint
from hgfx.config import RunConfig, get_settings, load_run_config
from hgfx.errors import DataError
from hgfx.services.datasets import list_class_files
from hgfx.services.graph_reason import HeteroGraphNet
from hgfx.services.trainer import CONFIG_FILE

logger = logging.getLogger(__name__)


@dataclass
class LoadedModel:
    model: HeteroGraphNet
    run_config: RunConfig
    checkpoint: str
    class_names: list[str] | None = None


def resolve_run_config(checkpoint: str | Path | None, config_path: str | Path | None = None) -> RunConfig:
    """Explicit config, else the ``config.json`` written next to the checkpoint, else defaults."""
    if config_path is not None:
        return load_run_config(config_path)
    if checkpoint is not None:
        sidecar = Path(checkpoint).parent / CONFIG_FILE
        if sidecar.is_file():
            return load_run_config(sidecar)
    return RunConfig()


def load_model(checkpoint: str | Path, config_path: str | Path | None = None, threads: int = 1) -> LoadedModel:
    run_config = resolve_run_config(checkpoint, config_path)
    model = HeteroGraphNet(run_config.model, threads=threads)
    model.load_state_dict(load_checkpoint(checkpoint))
    model.eval()
    class_names = None
    if run_config.data.root is not None:
        try:
            class_names = list_class_files(run_config.data.root)[0] or None
        except DataError:
            logger.warning("dataset root %s is gone; predictions will carry no class names", run_config.data.root)
    logger.info("loaded %s model (%d parameters) from %s", run_config.model.ablation, model.parameter_count(), checkpoint)
    return LoadedModel(model, run_config, str(checkpoint), class_names)


_model: LoadedModel | None = None


def get_model() -> LoadedModel | None:
    global _model
    if _model is None:
        settings = get_settings()
        if settings.checkpoint:
            _model = load_model(settings.checkpoint, settings.config, settings.threads)
    return _model


def init_model():
    if get_model() is None:
        logger.warning("HGFX_CHECKPOINT is not set; inference endpoints will answer 503")


def close_model():
    global _model
    _model = None
