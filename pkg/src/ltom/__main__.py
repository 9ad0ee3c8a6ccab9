"""Allow ``python -m ltom``."""

import sys

from .cli import main

sys.exit(main())
