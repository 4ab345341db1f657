import sys

from todqos.cli import main

sys.exit(main())
