import sys

from vlscc.harness.cli import main

sys.exit(main())
