import sys

from potlearn.cli import main

sys.exit(main())
