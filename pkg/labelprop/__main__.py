import sys

from labelprop.main import main

sys.exit(main())
