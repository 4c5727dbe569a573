import sys

from dpselect.cli import main

sys.exit(main())
