"""
The command-line pipeline
=========================

Runs ``synth -> prepare -> train -> predict -> validate`` with
``demos/pipeline.json`` (about a minute) and prints the comparison table:
one fixed-effects fit per smoke source, annotations against model masks.
The same steps from a shell::

    plumeseg synth --config demos/pipeline.json
    plumeseg prepare --config demos/pipeline.json
    ...
"""

# %%
import csv
import sys
from pathlib import Path

from plumeseg import cli

config = Path(__file__).with_name("pipeline.json")
for cmd in cli.COMMANDS:
    code = cli.main([cmd, "--config", str(config), *sys.argv[1:]])
    print(f"{cmd:9s} exit {code}")
    if code not in (cli.EXIT_OK, cli.EXIT_FAILURE):
        sys.exit(code)

# %%
out = cli.load_config(config, cli._overrides(cli.build_parser().parse_args(["validate", "--config", str(config), *sys.argv[1:]])))["out"]
with open(Path(out) / "validate" / "comparison.csv", newline="") as fh:
    for row in csv.DictReader(fh):
        print(f"  {row['source']:12s} beta1 {row['beta1'][:6]:>6s}  W adj R2 {row['within_adj_r2'][:6]:>6s}  {row['status']}")
print("outputs under", out)
