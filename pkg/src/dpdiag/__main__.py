import sys

from dpdiag.cli import main

sys.exit(main())
