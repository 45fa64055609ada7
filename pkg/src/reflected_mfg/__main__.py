import sys

from reflected_mfg.cli import main

sys.exit(main())
