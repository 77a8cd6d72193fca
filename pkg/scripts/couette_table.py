#!/usr/bin/env python3
"""
Run the Couette validation case and print the per-step error table.

Shows, for every time step, the maximum relative velocity error against the
exact linear profile, the Newton iteration count, the number of assembled
elements and whether the shear-slip connectivity update fired.

Usage:
    # Default mesh, 8 steps (one update at step 6)
    uv run python scripts/couette_table.py

    # More steps
    uv run python scripts/couette_table.py 20

    # Coarse mesh, GMRES instead of the direct solver
    uv run python scripts/couette_table.py 20 --nx 10 --iterative

Notes:
    - The errors sit at roundoff level; anything above 1e-10 indicates a broken step
"""

import sys

from rich.console import Console
from rich.table import Table

from ringslip.cases import generate_couette_case
from ringslip.errors import RingslipError
from ringslip.solver import SolverConfig, run_time_loop

console = Console()

ERROR_LIMIT = 1e-10


def main():
    """Run the Couette case and tabulate the errors."""
    args = sys.argv[1:]
    steps = 8
    nx = 50
    if args and not args[0].startswith("--"):
        steps = int(args[0])
    if "--nx" in args:
        nx = int(args[args.index("--nx") + 1])
    solver = "iterative" if "--iterative" in args else "direct"

    try:
        case = generate_couette_case(nx=nx)
        result = run_time_loop(case, steps, SolverConfig(linear_solver=solver, check_invariants=True))
    except RingslipError as e:
        console.print(f"[bold red]Error:[/bold red] {e}")
        sys.exit(1)

    table = Table(title=f"Couette, nx={nx}, {solver} solver")
    table.add_column("Step", justify="right")
    table.add_column("t", justify="right")
    table.add_column("max rel. error", justify="right")
    table.add_column("Newton", justify="right")
    table.add_column("Elements", justify="right")
    table.add_column("Update")
    for r in result.reports:
        style = "red" if r.max_rel_error is not None and r.max_rel_error > ERROR_LIMIT else ""
        table.add_row(
            str(r.step), f"{r.time:.2f}", f"[{style}]{r.max_rel_error:.3e}[/{style}]" if style
            else f"{r.max_rel_error:.3e}",
            str(r.newton_iters), str(r.n_active_elems), "yes" if r.did_connectivity_update else "",
        )
    console.print(table)

    worst = max(result.max_rel_errors, default=0.0)
    if worst > ERROR_LIMIT:
        console.print(f"[red]❌ Largest error {worst:.3e} exceeds {ERROR_LIMIT:g}[/red]")
        sys.exit(1)
    console.print(f"[green]✓[/green] Updates at steps {result.update_steps}, largest error {worst:.3e}")


if __name__ == "__main__":
    main()
