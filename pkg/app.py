"""
TrumpetFlow - command-line entry point

Run `python app.py --help` for the subcommands (generate, train, evaluate,
map, verify).
"""

import sys

from trumpetflow.cli import main

if __name__ == "__main__":
    sys.exit(main())
