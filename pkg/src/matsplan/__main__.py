import sys

from matsplan.cli import main

sys.exit(main())
