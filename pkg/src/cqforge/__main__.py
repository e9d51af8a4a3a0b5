import sys

from cqforge.cli import main

sys.exit(main())
