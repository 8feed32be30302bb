import sys

from darnet.cli import main

sys.exit(main())
