import sys

from drafteu.cli import main

sys.exit(main())
