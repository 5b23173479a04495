import sys

from panelgp.cli import main

sys.exit(main())
