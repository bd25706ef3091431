import sys

from kmex.cli import main

sys.exit(main())
