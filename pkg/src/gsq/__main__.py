import sys

from gsq.cli import main

sys.exit(main())
