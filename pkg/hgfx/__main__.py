import sys

from hgfx.cli import main

sys.exit(main())
