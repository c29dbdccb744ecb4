"""Drive the command-line front end from Python and read back its outputs."""

import json
import tempfile
from pathlib import Path

from flowlab.cli import main

out = Path(tempfile.mkdtemp()) / "ou_smoke"
code = main(["run", "--model", "ou", "--preset", "smoke", "--seed", "7", "--out", str(out)])
print("exit code", code)
for rep in json.loads((out / "bound_reports.json").read_text()):
    print(rep["bound_id"], rep["lhs"], "<=", rep["rhs"], rep["satisfied"])
print((out / "tables" / "bounds.csv").read_text())
