"""
Choosing an exit per domain
===========================

Replays the bundled ten-domain accuracy table and picks, for each domain,
the cheapest exit whose accuracy is within T points of the best full network.
"""

from amdl.exit_policy import best_row, load_table2, select_exit

table = load_table2()
print("configurations:", ", ".join(dict.fromkeys(r.config for r in table.rows)))

results, mean = best_row(T=3.5)
for r in results:
    print(f"{r.domain:>6}: {r.config:<9} exit {r.exit}  {r.accuracy:6.2f}  (best {r.baseline:6.2f}, {r.difficulty})")
print(f"mean accuracy {mean:.3f}")

# %%
# A looser threshold can only move a domain to an equal or cheaper exit.

for T in (0.0, 1.0, 3.5, 10.0, 100.0):
    exits = [select_exit(table, d, T).exit for d in table.domains()]
    print(f"T = {T:5.1f}: exits {exits}")
