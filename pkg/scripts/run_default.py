"""Run the shipped default experiment (cubic drift, d=4, 1e4 paths).

Takes roughly 5-10 minutes; artifacts land in out/default.
"""

import sys
from pathlib import Path

from ouperturb.cli import main

if __name__ == "__main__":
    cfg = Path(__file__).resolve().parents[1] / "configs" / "default.json"
    sys.exit(main(["all", "--config", str(cfg), *sys.argv[1:]]))
