import sys

from unislam.cli import main

sys.exit(main())
