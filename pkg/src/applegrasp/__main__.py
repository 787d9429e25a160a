import sys

from applegrasp.cli import main

sys.exit(main())
