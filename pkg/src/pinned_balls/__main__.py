"""``python -m pinned_balls``."""
import sys

from .cli import main

sys.exit(main())
