from mgevo.cli import main
import sys

sys.exit(main())
