import sys

from hmdface.cli import main

sys.exit(main())
