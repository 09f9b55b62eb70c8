import sys

from fslora.cli import main

sys.exit(main())
