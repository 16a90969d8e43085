from unislam.config import RunConfig, load_config
from unislam.exceptions import SlamError


__version__ = '0.1.0'
