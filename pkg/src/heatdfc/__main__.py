import sys

from heatdfc.cli import main

sys.exit(main())
