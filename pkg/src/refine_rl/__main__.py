import sys

from refine_rl.cli import main

sys.exit(main())
