import sys

from peripatric.cli import main

sys.exit(main())
