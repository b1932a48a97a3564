"""Study registry and command line front end."""

from .config import ConfigError, StudyConfig, default_config, load_config, parse_config
from .studies import STUDIES, StudyResult

__all__ = ["ConfigError", "StudyConfig", "StudyResult", "STUDIES", "default_config", "load_config", "parse_config"]
