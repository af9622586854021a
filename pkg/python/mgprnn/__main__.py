import sys

from mgprnn.cli import main

sys.exit(main())
