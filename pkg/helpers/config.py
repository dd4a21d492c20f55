"""
Environment configuration and logging setup
"""
import os
import json
import logging
from typing import Optional, Type, TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError

from helpers.errors import ConfigError

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
ModelT = TypeVar("ModelT", bound=BaseModel)

logger = logging.getLogger(__name__)

# The .env file lives in the project root, one directory above helpers/
script_dir = os.path.dirname(os.path.abspath(__file__))
project_root = os.path.dirname(script_dir)
env_path = os.path.join(project_root, '.env')


class Settings(BaseModel):
    """
    Process-wide settings read from the environment
    """
    threads: int = Field(..., ge=1, description="Width of the bench worker pool (FOMEMO_THREADS)")
    log_level: str = Field("INFO", description="Root log level (FOMEMO_LOG_LEVEL)")
    device: str = Field("cpu", description="Torch device for model inference and training (FOMEMO_DEVICE)")
    checkpoint: Optional[str] = Field(None, description="Checkpoint served by the HTTP service (FOMEMO_CHECKPOINT)")
    external_timeout: float = Field(60.0, gt=0, description="Seconds per external-problem evaluation (FOMEMO_EXTERNAL_TIMEOUT)")


def load_settings() -> Settings:
    """
    Load the .env file (if any) and build Settings from the environment

    Returns:
        Settings populated from FOMEMO_* variables with defaults for the missing ones
    """
    if os.path.exists(env_path):
        logger.debug(f"Loading .env file from: {env_path}")
        load_dotenv(env_path, override=False)

    default_threads = min(os.cpu_count() or 1, 8)
    threads = os.getenv("FOMEMO_THREADS")
    return Settings(
        threads=int(threads) if threads else default_threads,
        log_level=os.getenv("FOMEMO_LOG_LEVEL", "INFO").upper(),
        device=os.getenv("FOMEMO_DEVICE", "cpu"),
        checkpoint=os.getenv("FOMEMO_CHECKPOINT") or None,
        external_timeout=float(os.getenv("FOMEMO_EXTERNAL_TIMEOUT", "60")),
    )


def configure_logging(level: Optional[str] = None) -> None:
    """
    Configure root logging once for an entry point

    Args:
        level: Log level name; falls back to FOMEMO_LOG_LEVEL
    """
    level = level or os.getenv("FOMEMO_LOG_LEVEL", "INFO")
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)


def load_json_config(path: str, model_cls: Type[ModelT]) -> ModelT:
    """
    Parse and validate a JSON configuration file

    Args:
        path: Config file path (UTF-8)
        model_cls: Pydantic model the file must satisfy

    Returns:
        The validated model

    Raises:
        ConfigError: With file:line:column for syntax errors, or the dotted
            field path for validation errors
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    try:
        return model_cls.model_validate(payload)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(part) for part in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"{path}: {problems}") from e
