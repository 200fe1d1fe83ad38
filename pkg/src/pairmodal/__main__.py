"""Allow ``python -m pairmodal`` as an alias for the console script."""

import sys

from pairmodal.cli import main

if __name__ == "__main__":
    sys.exit(main())
