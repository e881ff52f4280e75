import sys

from fedgg.cli import main

sys.exit(main())
