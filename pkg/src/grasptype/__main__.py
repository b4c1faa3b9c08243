import sys

from grasptype.cli import main

sys.exit(main())
