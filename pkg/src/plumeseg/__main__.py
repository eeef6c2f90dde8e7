import sys

from plumeseg.cli import main

sys.exit(main())
