import sys

from psens.cli import main

sys.exit(main())
