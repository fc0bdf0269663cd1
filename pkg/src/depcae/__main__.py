import sys

from depcae.cli import main

sys.exit(main())
