""" Builds the protocol budget table in markdown format for README.md """

import dataclasses

from fvworkbench.__main__ import BUDGET_HELP
from fvworkbench.config import Budgets

print("| Budget | Default | Description |")
print("|--------|---------|-------------|")
for field in dataclasses.fields(Budgets):
    print(f"|{field.name}|{field.default}|{BUDGET_HELP[field.name]}|")
