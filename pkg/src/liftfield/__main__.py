"""Allow ``python -m liftfield`` as an alias for the console script."""

import sys

from liftfield.cli import main

if __name__ == "__main__":
    sys.exit(main())
