# main.py
# Entry point: `python main.py train --synthetic --task 1step`
import sys

from stemcast.cli import main

if __name__ == "__main__":
    sys.exit(main())
