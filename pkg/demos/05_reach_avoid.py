"""Full dt10 pipeline through the CLI entry point, including the reach-avoid controller."""

import sys
import tempfile
from pathlib import Path

from ddrom import cli

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "dt10"
code = cli.main(["demo", "dt10", "--out", str(out)])
print("exit code", code)
print((out / "synthesis_report.txt").read_text())
