import sys

from ipcnav.cli import main

sys.exit(main())
