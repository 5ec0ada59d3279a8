import sys

from tubeskel.cli import main

sys.exit(main())
