import sys

from podsim.cli import main

sys.exit(main())
