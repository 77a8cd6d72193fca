"""
ringslip CLI - space-time flow solver on rings of sliding mesh blocks.

Usage:
    ringslip run --case couette --steps 8          # Validation run
    ringslip run --case packaging --scale 0.05     # Packaging machine
    ringslip run --config case.cfg                 # Settings from a file
    ringslip mesh --case couette -o couette.msh    # Write the generated mesh
    ringslip info --case packaging                 # Mesh statistics
"""

from pathlib import Path
from typing import Annotated, Optional

import typer
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from . import __version__
from .cases import build_case
from .config import CaseKind, parse_config
from .errors import RingslipError
from .meshfile import write_mesh
from .output import SnapshotWriter, write_error_csv, write_final_state
from .solver import RunResult, SolverConfig, run_time_loop

app = typer.Typer(
    name="ringslip",
    help="Space-time flow solver for periodically moving mesh blocks",
    add_completion=False,
    rich_markup_mode="rich",
)
console = Console()

CaseOption = Annotated[Optional[CaseKind], typer.Option("--case", "-c", help="Case to build")]
ConfigOption = Annotated[Optional[Path], typer.Option("--config", help="key = value settings file", exists=True)]
ScaleOption = Annotated[Optional[float], typer.Option("--scale", help="Packaging mesh refinement (0, 1]")]


def version_callback(value: bool):
    """Show version and exit."""
    if value:
        console.print(f"[bold]ringslip[/bold] version {__version__}")
        raise typer.Exit()


@app.callback()
def main(
    version: Annotated[
        bool,
        typer.Option("--version", "-v", callback=version_callback, is_eager=True, help="Show version and exit"),
    ] = False,
):
    """
    Space-time finite element flow solver with a virtual-ring mesh update.

    Moving blocks circulate on a closed ring; a thin update layer shears and
    slips between moving and static mesh parts, so no remeshing is needed.
    """


def _fail(message: str) -> None:
    console.print(f"[bold red]Error:[/bold red] {message}")
    raise typer.Exit(1)


def _summary(result: RunResult) -> Table:
    table = Table(title="Run summary", show_header=True)
    table.add_column("Step", justify="right")
    table.add_column("t", justify="right")
    table.add_column("Newton", justify="right")
    table.add_column("Elements", justify="right")
    table.add_column("Max rel. error", justify="right")
    table.add_column("Slip")
    reports = result.reports
    shown = reports if len(reports) <= 20 else reports[:10] + reports[-10:]
    for r in shown:
        err = "-" if r.max_rel_error is None else f"{r.max_rel_error:.3e}"
        table.add_row(
            str(r.step), f"{r.time:.4g}", str(r.newton_iters), str(r.n_active_elems), err,
            "[cyan]yes[/cyan]" if r.did_connectivity_update else "",
        )
    return table


@app.command()
def run(
    case: CaseOption = None,
    config: ConfigOption = None,
    steps: Annotated[Optional[int], typer.Option("--steps", "-n", help="Number of time steps")] = None,
    dt: Annotated[Optional[float], typer.Option("--dt", help="Slab length in seconds")] = None,
    scale: ScaleOption = None,
    out: Annotated[Optional[Path], typer.Option("--out", "-o", help="Output directory")] = None,
    write_every: Annotated[
        Optional[int], typer.Option("--write-every", help="Snapshot cadence in steps (0 = none)")
    ] = None,
    check_invariants: Annotated[
        Optional[bool], typer.Option("--check-invariants", help="Assert ring invariants every step")
    ] = None,
    deterministic: Annotated[
        Optional[bool], typer.Option("--deterministic/--no-deterministic", help="Fixed-order assembly")
    ] = None,
    linear_solver: Annotated[
        Optional[str], typer.Option("--linear-solver", help="direct or iterative")
    ] = None,
    verbose: Annotated[bool, typer.Option("--verbose", help="Print Newton iterations")] = False,
):
    """
    Run a case and write snapshots plus the error history.

    Examples:
        ringslip run --case couette --steps 8
        ringslip run --case packaging --scale 0.05 --dt 2e-3 --steps 100
    """
    overrides = {
        "case": case, "steps": steps, "dt": dt, "scale": scale, "out": out,
        "write_every": write_every, "check_invariants": check_invariants,
        "deterministic": deterministic, "linear_solver": linear_solver,
    }
    result = None
    try:
        cfg = parse_config(config, overrides)
        console.print(Panel.fit(f"[bold]ringslip[/bold] {cfg.case.value}", subtitle=f"{cfg.steps} steps"))
        with console.status("[bold blue]Building mesh..."):
            sim = build_case(cfg)
        console.print(
            f"[dim]{sim.mesh.n_elements} elements, {len(sim.mesh.referenced_nodes())} nodes, "
            f"dt={sim.dt:g}, delta={sim.ring.delta:g}[/dim]"
        )
        solver_cfg = SolverConfig(
            linear_solver=cfg.linear_solver,
            deterministic_assembly=cfg.deterministic,
            check_invariants=cfg.check_invariants,
            verbose=verbose,
        )
        writer = SnapshotWriter(cfg.out, cfg.write_every)
        result = RunResult()
        try:
            result = run_time_loop(sim, cfg.steps, solver_cfg, sink=writer, result=result)
        finally:
            # Partial histories are kept when a step fails
            write_error_csv(result.reports, cfg.out / "errors.csv")
            if result.final is not None:
                write_final_state(result.final, cfg.out / "final_state.npz")
    except RingslipError as e:
        _fail(str(e))

    console.print(_summary(result))
    for incident in result.incidents:
        console.print(f"[yellow]⚠[/yellow] {incident}")
    if result.update_steps:
        console.print(f"[dim]Connectivity updates at steps {result.update_steps}[/dim]")
    console.print(f"[green]✓[/green] Output written to {cfg.out}")


def _load(case: CaseKind | None, config: Path | None, scale: float | None):
    cfg = parse_config(config, {"case": case, "scale": scale})
    return cfg, build_case(cfg)


@app.command()
def mesh(
    case: CaseOption = None,
    output: Annotated[Path, typer.Option("--output", "-o", help="Mesh file to write")] = Path("ring.msh"),
    config: ConfigOption = None,
    scale: ScaleOption = None,
):
    """Write the generated case mesh and ring topology in the text mesh format."""
    try:
        _, sim = _load(case, config, scale)
        write_mesh(output, sim.mesh, sim.ring)
    except RingslipError as e:
        _fail(str(e))
    console.print(f"[green]✓[/green] Mesh written to {output}")


@app.command()
def info(
    case: CaseOption = None,
    config: ConfigOption = None,
    scale: ScaleOption = None,
):
    """Print mesh and ring statistics of a case."""
    try:
        _, sim = _load(case, config, scale)
    except RingslipError as e:
        _fail(str(e))
    ring = sim.ring
    table = Table(title=f"{sim.name} mesh", show_header=False)
    table.add_column("Quantity")
    table.add_column("Value", justify="right")
    table.add_row("Elements", str(sim.mesh.n_elements))
    table.add_row("Referenced nodes", str(len(sim.mesh.referenced_nodes())))
    table.add_row("Blocks (+1 virtual)", str(ring.n_blocks))
    table.add_row("Block length", f"{ring.block_length:g}")
    table.add_row("Ring length", f"{ring.ring_length:g}")
    table.add_row("delta", f"{ring.delta:g}")
    table.add_row("x_crit", f"{ring.x_crit:g}")
    table.add_row("Update layers", str(len(ring.layers)))
    table.add_row("Layer elements", str(len(ring.layer_elements)))
    for key, value in sim.info.items():
        table.add_row(key, str(value))
    console.print(table)


if __name__ == "__main__":
    app()
