import os
import sys
import logging
from typing import List, Optional
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

from commands.pipeline_commands import build_parser, run_command
from utils.errors import PipelineError

# Configure logging
logging.basicConfig(
    level=os.getenv("MBRL_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)
logger = logging.getLogger(__name__)


def main(argv: Optional[List[str]] = None) -> int:
    """Run one pipeline stage; the return value is the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        status = run_command(args)
    except PipelineError as e:
        logger.error(f"{args.command} failed ({type(e).__name__}): {e.detail}")
        return e.exit_code
    logger.info(f"{args.command}: {status}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
