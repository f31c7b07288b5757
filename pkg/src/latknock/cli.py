"""Batch command-line interface.

Three subcommands cover the pipeline: ``fit-copula`` (step one), ``select``
(steps two and three: plain fit, knockoff draws, derandomised selection), and
``simulate`` (the replicated synthetic study).  A TOML config file can supply
any option; explicit flags override it.  Exit codes: 0 success, 2 bad
usage/config/data, 3 numerical failure; errors are emitted as JSON on stderr.

All outputs are deterministic given the seed: randomness derives from the
single 64-bit seed through counter-style mixing, reductions are order-fixed,
and wall-clock timings go to a separate sidecar file.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from ._rng import derive_seed
from . import figures
from .copula import FitConfig, fit_copula, load_params, regularize_spectrum, save_params
from .data import (
    load_item_bank,
    load_meta,
    load_predictors,
    load_responses,
    summarize_missingness,
)
from .errors import ConfigError, DataError, LatknockError, NumericalError
from .knockoff import KnockoffRunConfig, derandomized_select, s_equicorrelated, s_mvr
from .latreg import EmConfig, bootstrap_se, fit_latent_regression, flatten_params
from .simstudy import StudyReport, desk_preset, paper_preset, run_study

_EXIT_CONFIG = 2
_EXIT_NUMERICAL = 3


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj)!r}")


def _write_json(payload, path: Path) -> None:
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n",
        encoding="utf-8",
    )


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".12g")
    return str(x)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fail(exc: Exception, out_dir: Path | None) -> None:
    code = _EXIT_CONFIG if isinstance(exc, (ConfigError, DataError, FileNotFoundError)) else _EXIT_NUMERICAL
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    sys.stderr.write(json.dumps(payload) + "\n")
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            _write_json(payload, out_dir / "error.json")
        except OSError:
            pass
    sys.exit(code)


def _load_config(path: str | None, section: str) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    with open(p, "rb") as fh:
        raw = tomllib.load(fh)
    cfg = dict(raw.get(section, {}))
    return cfg


def _resolve(defaults: dict, file_cfg: dict, flags: dict) -> dict:
    out = dict(defaults)
    for key, val in file_cfg.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = val
    for key, val in flags.items():
        if val is not None:
            out[key] = val
    return out


def _parse_nu(text) -> tuple:
    if isinstance(text, (list, tuple)):
        values = [int(v) for v in text]
    else:
        values = [int(tok) for tok in str(text).split(",") if tok.strip()]
    if not values or any(v < 1 for v in values):
        raise ConfigError("--nu needs a comma-separated list of integers >= 1")
    return tuple(sorted(set(values)))


@click.group()
def main() -> None:
    """Knockoff-based variable selection for latent regression with missing
    mixed-type predictors."""


# ---------------------------------------------------------------------------
# fit-copula
# ---------------------------------------------------------------------------


@main.command("fit-copula")
@click.option("--predictors", required=True, help="Predictor CSV path.")
@click.option("--meta", "meta_path", required=True, help="Variable metadata JSON path.")
@click.option("--out", default=".", help="Output directory.")
@click.option("--config", "config_path", default=None, help="TOML config file.")
@click.option("--seed", type=int, default=None, help="Base seed (default 0).")
@click.option("--burn-in", type=int, default=None, help="Burn-in iterations (default 50).")
@click.option("--iters", type=int, default=None, help="Averaged iterations (default 150).")
@click.option("--merge-below", type=float, default=None, help="Merge sparse ordinal categories below this observed fraction.")
@click.option("--min-overlap", type=int, default=None, help="Minimum jointly observed rows per pair (default 30).")
@click.option("--no-figures", is_flag=True, help="Skip PNG rendering.")
def cmd_fit_copula(predictors, meta_path, out, config_path, seed, burn_in, iters,
                   merge_below, min_overlap, no_figures):
    """Fit the Gaussian copula and write copula.json plus fit_log.csv."""
    out_dir = Path(out)
    try:
        cfg = _resolve(
            {"seed": 0, "burn_in": 50, "iters": 150, "merge_below": None, "min_overlap": 30},
            _load_config(config_path, "fit_copula"),
            {"seed": seed, "burn_in": burn_in, "iters": iters,
             "merge_below": merge_below, "min_overlap": min_overlap},
        )
        ds = load_predictors(predictors, meta_path, merge_below=cfg["merge_below"])
        fit_cfg = FitConfig(cfg["burn_in"], cfg["iters"], seed=cfg["seed"])
        from .copula import default_init

        init = default_init(ds, min_overlap=cfg["min_overlap"])
        result = fit_copula(ds, init=init, cfg=fit_cfg)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_params(
            result.params,
            out_dir / "copula.json",
            names=ds.names,
            fit_meta={"seed": cfg["seed"], "burn_in": cfg["burn_in"], "iters": cfg["iters"],
                      "clipped_rows": result.clipped_rows},
        )
        _write_csv(
            out_dir / "fit_log.csv",
            ["iter", "step_size", "mean_loglik"],
            [
                (t + 1, result.step_sizes[t], result.loglik_trace[t])
                for t in range(len(result.loglik_trace))
            ],
        )
        summary = summarize_missingness(ds)
        click.echo(
            f"fit-copula: N={ds.n_rows} p={ds.n_vars} "
            f"missing={summary['overall_rate']:.3f} -> {out_dir / 'copula.json'}"
        )
        if not no_figures:
            figures.render_fit_log(result.step_sizes, result.loglik_trace, out_dir / "fit_log.png")
    except LatknockError as exc:
        _fail(exc, out_dir)
    except FileNotFoundError as exc:
        _fail(exc, out_dir)


# ---------------------------------------------------------------------------
# select
# ---------------------------------------------------------------------------


@main.command("select")
@click.option("--predictors", required=True)
@click.option("--meta", "meta_path", required=True)
@click.option("--responses", required=True, help="Response CSV path.")
@click.option("--items", "items_path", required=True, help="Item bank JSON path.")
@click.option("--out", default=".")
@click.option("--config", "config_path", default=None)
@click.option("--copula", "copula_path", default=None,
              help="Fitted copula.json (default <out>/copula.json).")
@click.option("--fit-copula", "do_fit_copula", is_flag=True,
              help="Fit the copula in-process instead of loading it.")
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=int, default=None)
@click.option("--nu", default=None, help="Comma-separated nominal PFER levels (default 1).")
@click.option("--runs", type=int, default=None, help="Number of knockoff runs M (default 31).")
@click.option("--eta", type=float, default=None, help="Selection-frequency threshold (default 0.5).")
@click.option("--s-method", type=click.Choice(["mvr", "equi"]), default=None)
@click.option("--gibbs-sweeps", type=int, default=None, help="Sweeps for the knockoff imputation chain (default 200).")
@click.option("--em-burn-in", type=int, default=None)
@click.option("--em-iters", type=int, default=None)
@click.option("--bootstrap", "bootstrap_b", type=int, default=None,
              help="Bootstrap replications for coefficient SEs (default 0 = off).")
@click.option("--no-figures", is_flag=True)
def cmd_select(predictors, meta_path, responses, items_path, out, config_path,
               copula_path, do_fit_copula, seed, threads, nu, runs, eta, s_method,
               gibbs_sweeps, em_burn_in, em_iters, bootstrap_b, no_figures):
    """Run the three-step pipeline and write selection.json / selection.csv."""
    out_dir = Path(out)
    try:
        cfg = _resolve(
            {
                "seed": 0,
                "threads": 1,
                "nu": (1,),
                "runs": 31,
                "eta": 0.5,
                "s_method": "mvr",
                "gibbs_sweeps": 200,
                "em_burn_in": 20,
                "em_iters": 40,
                "bootstrap": 0,
                "copula_burn_in": 50,
                "copula_iters": 150,
            },
            _load_config(config_path, "select"),
            {
                "seed": seed,
                "threads": threads,
                "nu": nu,
                "runs": runs,
                "eta": eta,
                "s_method": s_method,
                "gibbs_sweeps": gibbs_sweeps,
                "em_burn_in": em_burn_in,
                "em_iters": em_iters,
                "bootstrap": bootstrap_b,
            },
        )
        nu_levels = _parse_nu(cfg["nu"])
        ds = load_predictors(predictors, meta_path)
        bank = load_item_bank(items_path)
        resp = load_responses(responses, bank)
        out_dir.mkdir(parents=True, exist_ok=True)

        if do_fit_copula:
            fit_cfg = FitConfig(cfg["copula_burn_in"], cfg["copula_iters"],
                                seed=derive_seed(cfg["seed"], 0x1))
            cop_result = fit_copula(ds, cfg=fit_cfg)
            cop = cop_result.params
            save_params(cop, out_dir / "copula.json", names=ds.names,
                        fit_meta={"seed": fit_cfg.seed, "burn_in": fit_cfg.burn_in,
                                  "iters": fit_cfg.iters})
        else:
            source = Path(copula_path) if copula_path else out_dir / "copula.json"
            if not source.exists():
                raise ConfigError(
                    f"fitted copula not found at {source}; run fit-copula or pass --fit-copula"
                )
            cop = load_params(source)
            if cop.p != ds.n_vars:
                raise DataError("copula.json dimension does not match the predictors")
        cop = regularize_spectrum(cop)

        em_cfg = EmConfig(cfg["em_burn_in"], cfg["em_iters"],
                          seed=derive_seed(cfg["seed"], 0x2))
        plain = fit_latent_regression(resp, ds, cop, bank, em_cfg)
        sigma_hat = cop.sigma()
        sdiag = s_mvr(sigma_hat) if cfg["s_method"] == "mvr" else s_equicorrelated(sigma_hat)
        drm = derandomized_select(
            ds,
            resp,
            bank,
            cop,
            plain.params,
            sdiag,
            EmConfig(cfg["em_burn_in"], cfg["em_iters"], seed=0),
            KnockoffRunConfig(
                m_runs=cfg["runs"],
                eta=cfg["eta"],
                nu_levels=nu_levels,
                gibbs_sweeps=cfg["gibbs_sweeps"],
                base_seed=derive_seed(cfg["seed"], 0x3),
                threads=cfg["threads"],
            ),
        )

        boot = None
        if cfg["bootstrap"]:
            def _refit(ds_b, resp_b, seed_b):
                return fit_latent_regression(
                    resp_b, ds_b, cop, bank,
                    EmConfig(cfg["em_burn_in"], cfg["em_iters"], seed=seed_b),
                ).params

            boot = bootstrap_se(_refit, ds, resp, n_boot=cfg["bootstrap"],
                                seed=derive_seed(cfg["seed"], 0x4))

        _emit_selection(out_dir, ds, plain.params, drm, nu_levels, cfg, boot, no_figures)
        click.echo(
            "select: "
            + "; ".join(
                f"nu={nu}: {len(drm.selection(nu).selected)} selected" for nu in nu_levels
            )
            + f" -> {out_dir / 'selection.csv'}"
        )
    except LatknockError as exc:
        _fail(exc, out_dir)
    except FileNotFoundError as exc:
        _fail(exc, out_dir)


def _block_summary(params, j):
    """Signed scalar for single-coefficient blocks, Euclidean norm otherwise."""
    b = params.beta[j]
    return float(b[0]) if b.size == 1 else float(np.linalg.norm(b))


def _emit_selection(out_dir, ds, plain_params, drm, nu_levels, cfg, boot, no_figures):
    names = ds.names
    p = ds.n_vars
    first_nu = nu_levels[0]
    order = np.argsort(-drm.selection(first_nu).pi, kind="stable")
    boot_block = None
    if boot is not None:
        # per-variable SE: SD of the block summary across bootstrap draws
        draws = boot["draws"]
        sizes = [b.size for b in plain_params.beta]
        boot_block = np.zeros(p)
        for j in range(p):
            start = 1 + sum(sizes[:j])
            block = draws[:, start : start + sizes[j]]
            summary = block[:, 0] if sizes[j] == 1 else np.linalg.norm(block, axis=1)
            boot_block[j] = float(summary.std(ddof=1))
    header = ["variable"]
    for nu in nu_levels:
        header += [f"pi_nu{nu}", f"selected_nu{nu}"]
    header += ["beta_hat", "se"]
    rows = []
    for j in order:
        row = [names[j]]
        for nu in nu_levels:
            sel = drm.selection(nu)
            row += [sel.pi[j], int(j in set(sel.selected))]
        row.append(_block_summary(plain_params, j))
        row.append(boot_block[j] if boot_block is not None else "")
        rows.append(row)
    _write_csv(out_dir / "selection.csv", header, rows)

    payload = {
        "config": {
            "m_runs": drm.m_runs,
            "eta": drm.eta,
            "nu_levels": list(nu_levels),
            "s_method": cfg["s_method"],
            "gibbs_sweeps": cfg["gibbs_sweeps"],
            "seed": cfg["seed"],
            "em_burn_in": cfg["em_burn_in"],
            "em_iters": cfg["em_iters"],
        },
        "base_seed": drm.base_seed,
        "run_seeds": drm.run_seeds,
        "variables": names,
        "w_runs": drm.w_runs,
        "plain_fit": {
            "beta0": plain_params.beta0,
            "beta": [b for b in plain_params.beta],
            "sigma2": plain_params.sigma2,
        },
        "by_nu": {
            str(nu): {
                "pi": drm.selection(nu).pi,
                "selected": [names[j] for j in drm.selection(nu).selected],
                "selected_indices": drm.selection(nu).selected,
                "per_run_tau": [s.tau for s in drm.selection(nu).per_run],
                "per_run_selected": [s.selected for s in drm.selection(nu).per_run],
            }
            for nu in nu_levels
        },
    }
    if boot is not None:
        payload["bootstrap"] = {
            "n_success": boot["n_success"],
            "se_flat": boot["se"],
            "se_block_summary": boot_block,
            "failures": boot["failures"],
        }
    _write_json(payload, out_dir / "selection.json")
    if not no_figures:
        figures.render_selection(
            names,
            {nu: drm.selection(nu).pi for nu in nu_levels},
            drm.eta,
            out_dir / "selection.png",
        )


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


@main.command("simulate")
@click.option("--preset", type=click.Choice(["desk", "paper"]), default=None)
@click.option("--out", default=".")
@click.option("--config", "config_path", default=None)
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=int, default=None)
@click.option("--replications", type=int, default=None)
@click.option("--n", "n_values", default=None, help="Comma-separated sample sizes.")
@click.option("--nu", default=None)
@click.option("--runs", type=int, default=None, help="Knockoff runs M per replication.")
@click.option("--eta", type=float, default=None)
@click.option("--s-method", type=click.Choice(["mvr", "equi"]), default=None)
@click.option("--gibbs-sweeps", type=int, default=None)
@click.option("--dry-run", is_flag=True, help="Print the resolved config without running.")
@click.option("--no-figures", is_flag=True)
def cmd_simulate(preset, out, config_path, seed, threads, replications, n_values,
                 nu, runs, eta, s_method, gibbs_sweeps, dry_run, no_figures):
    """Run the replicated synthetic study and write table1.csv / report.json."""
    out_dir = Path(out)
    try:
        cfg = _resolve(
            {
                "preset": "desk",
                "seed": 0,
                "threads": 1,
                "replications": None,
                "n": None,
                "nu": None,
                "runs": None,
                "eta": None,
                "s_method": None,
                "gibbs_sweeps": None,
            },
            _load_config(config_path, "simulate"),
            {
                "preset": preset,
                "seed": seed,
                "threads": threads,
                "replications": replications,
                "n": n_values,
                "nu": nu,
                "runs": runs,
                "eta": eta,
                "s_method": s_method,
                "gibbs_sweeps": gibbs_sweeps,
            },
        )
        make = desk_preset if cfg["preset"] == "desk" else paper_preset
        overrides = {"seed": cfg["seed"]}
        if cfg["replications"] is not None:
            overrides["replications"] = int(cfg["replications"])
        if cfg["nu"] is not None:
            overrides["nu_levels"] = _parse_nu(cfg["nu"])
        if cfg["runs"] is not None:
            overrides["m_runs"] = int(cfg["runs"])
        if cfg["eta"] is not None:
            overrides["eta"] = float(cfg["eta"])
        if cfg["s_method"] is not None:
            overrides["s_method"] = cfg["s_method"]
        if cfg["gibbs_sweeps"] is not None:
            overrides["knockoff_gibbs_sweeps"] = int(cfg["gibbs_sweeps"])
        if cfg["n"] is None:
            n_list = [make().n]
        else:
            n_list = [int(tok) for tok in str(cfg["n"]).split(",") if tok.strip()]
        study_cfgs = [make(n=n_val, **overrides) for n_val in n_list]

        if dry_run:
            resolved = [
                {
                    "preset": cfg["preset"],
                    "p": sc.p,
                    "J": sc.j_items,
                    "N": sc.n,
                    "replications": sc.replications,
                    "nu_levels": list(sc.nu_levels),
                    "M": sc.m_runs,
                    "eta": sc.eta,
                    "seed": sc.seed,
                    "s_method": sc.s_method,
                    "knockoff_gibbs_sweeps": sc.knockoff_gibbs_sweeps,
                    "threads": cfg["threads"],
                }
                for sc in study_cfgs
            ]
            click.echo(json.dumps(resolved, indent=2, sort_keys=True))
            return

        out_dir.mkdir(parents=True, exist_ok=True)
        all_rows = []
        reports: list[StudyReport] = []
        for sc in study_cfgs:
            rep = run_study(sc, threads=cfg["threads"])
            reports.append(rep)
            all_rows.extend(rep.rows)
        _write_csv(
            out_dir / "table1.csv",
            ["N", "nu", "method", "pfer", "tpr", "se_pfer", "se_tpr"],
            [
                (r["N"], r["nu"], r["method"], r["pfer"], r["tpr"], r["se_pfer"], r["se_tpr"])
                for r in all_rows
            ],
        )
        _write_json(
            {
                "preset": cfg["preset"],
                "seed": cfg["seed"],
                "rows": all_rows,
                "per_replication": [
                    {"N": rep.config.n, "replications": rep.per_replication}
                    for rep in reports
                ],
                "failures": [f for rep in reports for f in rep.failures],
            },
            out_dir / "report.json",
        )
        _write_json(
            {
                "total_seconds": [rep.runtime_seconds for rep in reports],
                "mean_replication_seconds": [rep.mean_replication_seconds for rep in reports],
            },
            out_dir / "timings.json",
        )
        if not no_figures:
            figures.render_table1(all_rows, out_dir / "table1.png")
        for row in all_rows:
            click.echo(
                f"N={row['N']} nu={row['nu']} {row['method']}: "
                f"PFER={row['pfer']:.3f} TPR={100 * row['tpr']:.1f}%"
            )
    except LatknockError as exc:
        _fail(exc, out_dir)
    except FileNotFoundError as exc:
        _fail(exc, out_dir)


if __name__ == "__main__":
    main()
