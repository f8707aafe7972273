import logging

from app.cli import cli
from app.core.logging_config import configure_logging

# Configure logging
configure_logging()
logger = logging.getLogger(__name__)


if __name__ == "__main__":
    cli()
