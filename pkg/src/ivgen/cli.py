"""Command-line pipeline: synth, fit, train, generate, arb, hedge, diagnose.

Configuration precedence is defaults < command-line flags < JSON config
file sections. All randomness in a command flows from one --seed. Exit
codes: 0 success, 1 usage error, 2 data/domain error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import arbitrage, diagnostics, generator, hedging, training
from .basis import enumerate_basis, project_surface
from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .errors import DataError, NumericalError
from .fpca import build_fpcc_series, fit_fpca
from .market_data import (
    PAPER_DELTAS,
    PAPER_TAUS,
    SyntheticConfig,
    apply_transforms,
    fit_transforms,
    load_panel,
    synth_market,
    write_panel_csv,
)
from .nsde import NsdeModel
from .training import TrainConfig, train_three_stage, write_training_log


def _section(args, name) -> dict:
    if not args.config:
        return {}
    with open(args.config) as fh:
        doc = json.load(fh)
    section = doc.get(name, {})
    if not isinstance(section, dict):
        raise DataError(f"config section {name!r} must be an object")
    return section


def _resolve(section: dict, **flags):
    """Flags provide the baseline; config-file entries override them."""
    out = dict(flags)
    for key, val in section.items():
        if key not in out:
            raise DataError(f"unknown config key {key!r}")
        out[key] = val
    return out


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    params = _resolve(
        _section(args, "synth"),
        equities=args.equities.split(","),
        n_dates=args.dates,
        mode=args.mode,
        flat_vol=args.flat_vol,
    )
    params["equities"] = tuple(params["equities"])
    config = SyntheticConfig(**params)
    panel = synth_market(config, seed=args.seed)
    out = _out_dir(args)
    write_panel_csv(panel, out / "iv.csv", out / "prices.csv")
    print(f"synth: wrote {panel.n_dates} dates x {len(panel.equities)} equities to {out}")
    return 0


def cmd_fit(args) -> int:
    params = _resolve(
        _section(args, "fit"), order=args.order, threshold=args.threshold
    )
    panel = load_panel(args.iv, args.prices)
    spec = fit_transforms(panel)
    transformed = apply_transforms(panel, spec, "forward")
    basis = enumerate_basis(params["order"])
    min_quotes = min(
        panel.quote_count(d, e) for d in panel.dates for e in panel.equities
    )
    if min_quotes <= basis.size:
        raise DataError(
            f"well-posedness rule |I_t| > B violated: a (date, equity) cell has "
            f"{min_quotes} quotes but the basis has B = {basis.size} functions"
        )
    coeffs = []
    for d in transformed.dates:
        for e in transformed.equities:
            q = transformed.quotes[(d, e)]
            coeffs.append(
                project_surface(basis, q[:, 1], q[:, 0], q[:, 2], date=d, equity=e)
            )
    fpca_model = fit_fpca(coeffs, threshold=params["threshold"])
    series = build_fpcc_series(fpca_model, transformed)

    out = _out_dir(args)
    with open(out / "coefficients.csv", "w", newline="") as fh:
        import csv

        writer = csv.writer(fh)
        writer.writerow(["date", "equity", "k", "a_k", "rmse"])
        for c in coeffs:
            for k, a_k in enumerate(c.a):
                writer.writerow([c.date.isoformat(), c.equity, k, f"{a_k:.17g}", f"{c.rmse:.17g}"])
    (out / "transforms.json").write_text(spec.to_json())
    (out / "fpca.json").write_text(
        json.dumps(
            {
                "basis_order": fpca_model.basis.order_cap,
                "members": [list(m) for m in fpca_model.basis.members],
                "mean_coeffs": fpca_model.mean_coeffs.tolist(),
                "C": fpca_model.C.tolist(),
                "eigenvalues": fpca_model.eigenvalues.tolist(),
                "explained": fpca_model.explained.tolist(),
            },
            indent=2,
        )
    )
    bundle = CheckpointBundle(transforms=spec, fpca=fpca_model, series=series, model=None)
    save_checkpoint(out / "model.ivgn", bundle)
    print(
        f"fit: M={fpca_model.M} components explain "
        f"{fpca_model.explained[fpca_model.M - 1]:.4%}; checkpoint at {out / 'model.ivgn'}"
    )
    return 0


def cmd_train(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    model_params = _resolve(
        _section(args, "model"),
        hidden_dim=args.hidden,
        lag=args.lag,
        dt=args.dt,
        eps=args.eps,
    )
    train_params = _resolve(
        _section(args, "train"),
        stage1_iters=args.iters1,
        stage2_iters=args.iters2,
        stage3_iters=args.iters3,
        alpha=args.alpha,
        alpha_prime=args.alpha_prime,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        quadrature_points=args.quadrature_points,
    )
    series = bundle.series
    model = NsdeModel.create(
        state_dim=series.state_dim,
        hidden_dim=model_params["hidden_dim"],
        lag=model_params["lag"],
        dt=model_params["dt"],
        eps=model_params["eps"],
        seed=args.seed,
    )
    config = TrainConfig(seed=args.seed, **train_params)
    trained, log = train_three_stage(model, series, config)
    out = _out_dir(args)
    save_checkpoint(
        out / "model.ivgn",
        CheckpointBundle(
            transforms=bundle.transforms, fpca=bundle.fpca, series=series, model=trained
        ),
    )
    write_training_log(log, out / "training_log.csv")
    final = log[-1] if log else None
    print(
        f"train: {len(log)} iterations logged"
        + (f", final loss {final.loss:.6g}" if final else "")
        + f"; checkpoint at {out / 'model.ivgn'}"
    )
    return 0


def _decode_grid(args, section, transforms):
    deltas = section.get("grid_deltas", list(PAPER_DELTAS))
    taus = section.get("grid_taus", [t for t in PAPER_TAUS if t <= transforms.tau_max])
    return np.asarray(deltas, float), np.asarray(taus, float)


def cmd_generate(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    if bundle.is_partial:
        raise DataError("checkpoint has no trained model; run `ivgen train` first")
    section = _section(args, "generate")
    params = _resolve(
        {k: v for k, v in section.items() if k not in ("grid_deltas", "grid_taus")},
        n_steps=args.steps,
        n_scenarios=args.scenarios,
    )
    states = bundle.series.states()
    origin = states[-bundle.model.lag :]
    scen = generator.generate_paths(
        bundle.model,
        origin,
        n_steps=params["n_steps"],
        n_scenarios=params["n_scenarios"],
        base_seed=args.seed,
        threads=args.threads,
    )
    out = _out_dir(args)
    wrote = []
    if args.format in ("binary", "both"):
        generator.write_scenario_states(scen, out / "scenarios.bin")
        wrote.append("scenarios.bin")
    if args.format in ("csv", "both"):
        gd, gt = _decode_grid(args, section, bundle.transforms)
        decoded = generator.decode_scenarios(
            scen, bundle.model, bundle.fpca, bundle.transforms, gd, gt
        )
        generator.write_scenarios_csv(decoded, out / "scenarios.csv")
        wrote.append("scenarios.csv")
    print(
        f"generate: {scen.n_scenarios} scenarios x {scen.n_steps} steps -> "
        f"{', '.join(str(out / w) for w in wrote)}"
    )
    return 0


def cmd_arb(args) -> int:
    if not args.scenarios and not args.iv:
        raise DataError("arb needs --scenarios and/or --iv/--prices input")
    reports = {}
    bundle = None
    if args.scenarios:
        if not args.checkpoint:
            raise DataError("--scenarios requires --checkpoint to decode states")
        bundle = load_checkpoint(args.checkpoint)
        if bundle.is_partial:
            raise DataError("checkpoint has no trained model; run `ivgen train` first")
        scen = generator.read_scenario_states(args.scenarios)
        section = _section(args, "arb")
        gd, gt = _decode_grid(args, section, bundle.transforms)
        decoded = generator.decode_scenarios(
            scen, bundle.model, bundle.fpca, bundle.transforms, gd, gt
        )
        reports["sim"] = arbitrage.arbitrage_summary(arbitrage.scenario_day_metrics(decoded))
    if args.iv:
        if not args.prices:
            raise DataError("--iv requires --prices")
        panel = load_panel(args.iv, args.prices)
        reports["obs"] = arbitrage.arbitrage_summary(arbitrage.panel_day_metrics(panel))
    out = _out_dir(args)
    for kind in ("butterfly", "calendar"):
        arbitrage.write_quantile_table_csv(reports, kind, out / f"{kind}_quantiles.csv")
        arbitrage.write_negative_days_csv(reports, kind, out / f"{kind}_negative_days.csv")
    print(f"arb: wrote quantile and negative-day tables for {', '.join(reports)} to {out}")
    return 0


def cmd_hedge(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    if bundle.is_partial:
        raise DataError("checkpoint has no trained model; run `ivgen train` first")
    scen = generator.read_scenario_states(args.scenarios)
    params = _resolve(_section(args, "hedge"), expiry=args.expiry)
    from .fpca import split_states

    equities = tuple(bundle.transforms.per_equity.keys())
    fpcc0, prices_t0 = split_states(scen.origin_window[-1], len(equities), bundle.fpca.M)
    t0 = len(bundle.transforms.dates) - 1
    contracts = {
        e: hedging.HedgeContract(
            equity=e,
            strike=float(bundle.transforms.price_inverse(e, prices_t0[ei], t0)),
            expiry_steps=min(params["expiry"], scen.n_steps),
        )
        for ei, e in enumerate(equities)
    }
    dist = hedging.hedge_distribution(
        scen, bundle.model, bundle.fpca, bundle.transforms, contracts
    )
    out = _out_dir(args)
    hedging.write_pnl_csv(dist, out / "pnl.csv")
    hedging.write_pnl_quantiles_csv(dist, out / "pnl_quantiles.csv")
    print(f"hedge: {scen.n_scenarios} scenarios hedged; P&L tables at {out}")
    return 0


def cmd_diagnose(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    if bundle.is_partial:
        raise DataError("checkpoint has no trained model; run `ivgen train` first")
    model, series = bundle.model, bundle.series
    pits = training.pit_sequence(model, series)
    acf = diagnostics.pit_acf(pits, max_lag=args.max_lag)
    feature_ks = [diagnostics.ks_uniform(col) for col in pits.U.T]
    pair_ks = diagnostics.pairwise_sum_pit_ks(model, series)

    report = {
        "pit_penalty": training.pit_penalty(pits),
        "pit_acf": {"max_lag": args.max_lag, "per_feature": acf.tolist()},
        "feature_ks": {
            "reject_1pct": int(sum(r.reject_1pct for r in feature_ks)),
            "reject_5pct": int(sum(r.reject_5pct for r in feature_ks)),
            "statistics": [r.statistic for r in feature_ks],
        },
        "pairwise_sum_ks": {
            "n_pairs": len(pair_ks),
            "reject_1pct": int(sum(r.reject_1pct for r in pair_ks.values())),
            "reject_5pct": int(sum(r.reject_5pct for r in pair_ks.values())),
        },
    }

    # rolling correlations of (first FPCC, transformed price) per equity
    states = series.states()
    E, M = series.n_equities, series.M
    corr = {}
    for ei, e in enumerate(series.equities):
        fpc1 = states[:, ei * M]
        price = states[:, E * M + ei]
        entry = {}
        for window in (10, 30):
            vals, skipped = diagnostics.rolling_correlations(fpc1, price, window)
            edges, counts = diagnostics.correlation_histogram(vals)
            entry[f"obs_{window}"] = {
                "count": int(vals.size),
                "skipped": skipped,
                "hist_edges": edges.tolist(),
                "hist_counts": counts.tolist(),
                "frac_negative": float(np.mean(vals < 0)) if vals.size else None,
            }
        corr[e] = entry
    if args.scenarios:
        scen = generator.read_scenario_states(args.scenarios)
        paths = model.denormalize(scen.paths)
        for ei, e in enumerate(series.equities):
            vals, skipped = diagnostics.scenario_correlations(
                paths[:, :, ei * M], paths[:, :, E * M + ei]
            )
            edges, counts = diagnostics.correlation_histogram(vals)
            corr[e]["syn"] = {
                "count": int(vals.size),
                "skipped": skipped,
                "hist_edges": edges.tolist(),
                "hist_counts": counts.tolist(),
                "frac_negative": float(np.mean(vals < 0)) if vals.size else None,
            }
    report["fpc1_price_correlations"] = corr

    out = _out_dir(args)
    (out / "diagnostics.json").write_text(json.dumps(report, indent=2))
    print(
        f"diagnose: feature KS rejects {report['feature_ks']['reject_5pct']}/{pits.U.shape[1]}"
        f" at 5%; report at {out / 'diagnostics.json'}"
    )
    return 0


# -- wiring ----------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads")

    parser = argparse.ArgumentParser(prog="ivgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic market panel")
    p.add_argument("--mode", choices=["smile", "flat"], default="smile")
    p.add_argument("--equities", default="AAA,BBB")
    p.add_argument("--dates", type=int, default=300)
    p.add_argument("--flat-vol", dest="flat_vol", type=float, default=0.2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", parents=[common], help="fit transforms, basis, and FPCA")
    p.add_argument("--iv", required=True)
    p.add_argument("--prices", required=True)
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--threshold", type=float, default=0.995)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", parents=[common], help="train the neural SDE")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--lag", type=int, default=10)
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--iters1", type=int, default=5000)
    p.add_argument("--iters2", type=int, default=2000)
    p.add_argument("--iters3", type=int, default=2000)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--alpha-prime", dest="alpha_prime", type=float, default=100.0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=1e-4)
    p.add_argument("--quadrature-points", dest="quadrature_points", type=int, default=1001)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="sample future scenarios")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--scenarios", type=int, default=10000)
    p.add_argument("--format", choices=["csv", "binary", "both"], default="binary")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("arb", parents=[common], help="static-arbitrage metric tables")
    p.add_argument("--checkpoint")
    p.add_argument("--scenarios", help="scenario state dump from `generate`")
    p.add_argument("--iv", help="panel IV CSV for observed metrics")
    p.add_argument("--prices", help="panel price CSV for observed metrics")
    p.set_defaults(func=cmd_arb)

    p = sub.add_parser("hedge", parents=[common], help="delta-hedging backtest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenarios", required=True)
    p.add_argument("--expiry", type=int, default=30)
    p.set_defaults(func=cmd_hedge)

    p = sub.add_parser("diagnose", parents=[common], help="PIT and correlation diagnostics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenarios")
    p.add_argument("--max-lag", dest="max_lag", type=int, default=20)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    command = args.command
    try:
        return args.func(args)
    except DataError as exc:
        sys.stderr.write(f"error: code=2 command={command}: {exc}\n")
        return 2
    except NumericalError as exc:
        sys.stderr.write(f"error: code=3 command={command}: {exc}\n")
        return 3
    except OSError as exc:
        sys.stderr.write(f"error: code=2 command={command}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
