from mksv.cli import main
import sys

sys.exit(main())
