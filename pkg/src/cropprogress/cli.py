"""Command-line interface.

One executable with subcommands covering the whole pipeline: feature
construction, series smoothing, panel simulation, fixed and mixed fitting,
prediction/interpolation, cross-validated model selection, and the
agronomic requirement calculators.  Every JSON artifact embeds the tool
version and the fully resolved configuration; CSV outputs get a sidecar
``<name>.meta.json`` with the same provenance, and re-running a command
with an embedded config reproduces its outputs byte for byte.

Exit codes: 0 success, 1 validation error, 2 numerical failure.  With
``--json`` (before the subcommand) errors are also emitted as a JSON object
on stderr.
"""

from __future__ import annotations

import csv
import json
import sys

import click
import numpy as np

from . import __version__
from .agronomy import required_gdd_rate, requirements, transition_time
from .dataset import (
    StageScheme,
    join_panel,
    load_progress,
    load_reflectance,
    load_weather,
    write_progress,
    write_weather,
)
from .estimation import CumulativeLinkModel, load_model
from .evaluation import CvPlan, selection_grid
from .exceptions import DataError, FitError
from .features import (
    SETTINGS,
    CardinalTemperatures,
    build_features,
    setting_covariates,
    standardize,
    whittaker_smooth,
)
from .mixed import MixedCumulativeLinkModel
from .presets import CROP_PRESETS, crop_preset
from .simulate import SimConfig, simulate

_JSON_ERRORS = False


def _echo_meta(path, config):
    meta = {
        "tool": {"name": "cropprogress", "version": __version__},
        "config": config,
    }
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as handle:
        json.dump(meta, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _load_config(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as handle:
        payload = json.load(handle)
    # accept both a bare config object and an artifact carrying one
    return payload.get("config", payload)


def _resolve(config, flags, defaults):
    """Merge flag values over config-file values over defaults."""
    out = {}
    for key, default in defaults.items():
        flag = flags.get(key)
        if flag is not None:
            out[key] = flag
        elif key in config:
            out[key] = config[key]
        else:
            out[key] = default
    return out


def _scheme_and_cardinals(resolved):
    crop = resolved.get("crop")
    if crop:
        preset = crop_preset(crop)
        stages = resolved.get("stages") or list(preset.stages)
        cardinals = preset.cardinals
        name = crop
    else:
        stages = resolved.get("stages")
        if not stages:
            raise DataError("give --crop or --stages")
        name = resolved.get("crop_name", "custom")
        cardinals = None
    if isinstance(stages, str):
        stages = [s.strip() for s in stages.split(",") if s.strip()]
    explicit = [resolved.get(k) for k in ("t_base", "t_optimal", "t_ceiling")]
    if any(v is not None for v in explicit):
        if any(v is None for v in explicit):
            raise DataError("give all of --t-base, --t-optimal, --t-ceiling")
        cardinals = CardinalTemperatures(*map(float, explicit))
    return StageScheme(name, tuple(stages)), cardinals


def _build_table(resolved):
    scheme, cardinals = _scheme_and_cardinals(resolved)
    if cardinals is None:
        raise DataError("cardinal temperatures are required (crop preset or explicit)")
    panel = load_progress(resolved["progress"], scheme)
    weather = load_weather(resolved["weather"])
    reflectance = (
        load_reflectance(resolved["reflectance"]) if resolved.get("reflectance") else None
    )
    frame = build_features(
        weather, cardinals, reflectance,
        lam=float(resolved["lam"]), smooth_ndvi=not resolved.get("no_smooth", False),
    )
    return join_panel(panel, frame), frame, scheme, cardinals


def _parse_kv_floats(pairs, what):
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise DataError(f"{what} must look like name=value, got {pair!r}")
        key, _, value = pair.partition("=")
        try:
            out[key.strip()] = float(value)
        except ValueError:
            raise DataError(f"{what} {pair!r}: not a number") from None
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x):
    return repr(float(x))


@click.group(name="cropprogress")
@click.version_option(__version__)
@click.option("--json", "json_errors", is_flag=True,
              help="Emit machine-readable error JSON on stderr.")
def cli(json_errors):
    """Crop progress modeling: features, fitting, evaluation, agronomy.

    CSV schemas are documented in SCHEMAS.md next to this package's README
    and summarized in each subcommand's --help.
    """
    global _JSON_ERRORS
    _JSON_ERRORS = json_errors


@cli.command()
@click.option("--weather", required=True, type=click.Path(), help="Weather CSV: season,day,tmin,tmax.")
@click.option("--reflectance", type=click.Path(), help="Reflectance CSV: season,day,red,nir (blanks = cloud gaps).")
@click.option("--crop", type=click.Choice(sorted(CROP_PRESETS)), help="Crop preset for cardinal temperatures.")
@click.option("--t-base", type=float, help="Base cardinal temperature (deg C).")
@click.option("--t-optimal", type=float, help="Optimal cardinal temperature (deg C).")
@click.option("--t-ceiling", type=float, help="Ceiling cardinal temperature (deg C).")
@click.option("--lam", type=float, default=None, help="Whittaker penalty (default 100).")
@click.option("--setting", type=click.Choice(sorted(SETTINGS)), default=None,
              help="Covariate setting whose columns get standardized copies (default thermal).")
@click.option("--no-smooth", is_flag=True, help="Accumulate raw NDVI instead of the smoothed series.")
@click.option("--config", "config_path", type=click.Path(), help="JSON config supplying defaults.")
@click.option("--output", required=True, type=click.Path(), help="Output feature CSV.")
def features(weather, reflectance, crop, t_base, t_optimal, t_ceiling, lam,
             setting, no_smooth, config_path, output):
    """Build the daily feature CSV (raw plus standardized columns)."""
    config = _load_config(config_path)
    resolved = _resolve(
        config,
        {"weather": weather, "reflectance": reflectance, "crop": crop,
         "t_base": t_base, "t_optimal": t_optimal, "t_ceiling": t_ceiling,
         "lam": lam, "setting": setting,
         "no_smooth": no_smooth or None, "output": output},
        {"weather": None, "reflectance": None, "crop": None, "t_base": None,
         "t_optimal": None, "t_ceiling": None, "lam": 100.0,
         "setting": "thermal", "no_smooth": False, "output": None},
    )
    preset_cardinals = crop_preset(resolved["crop"]).cardinals if resolved["crop"] else None
    explicit = [resolved.get(k) for k in ("t_base", "t_optimal", "t_ceiling")]
    if any(v is not None for v in explicit):
        if any(v is None for v in explicit):
            raise DataError("give all of --t-base, --t-optimal, --t-ceiling")
        cardinals = CardinalTemperatures(*map(float, explicit))
    else:
        cardinals = preset_cardinals
    if cardinals is None:
        raise DataError("cardinal temperatures are required (crop preset or explicit)")

    weather_series = load_weather(resolved["weather"])
    reflectance_series = (
        load_reflectance(resolved["reflectance"]) if resolved["reflectance"] else None
    )
    frame = build_features(
        weather_series, cardinals, reflectance_series,
        lam=float(resolved["lam"]), smooth_ndvi=not resolved["no_smooth"],
    )
    covs = [c for c in setting_covariates(resolved["setting"]) if frame.has_column(c)]
    missing = set(setting_covariates(resolved["setting"])) - set(covs)
    if missing:
        raise DataError(
            f"setting {resolved['setting']!r} needs columns {sorted(missing)}; "
            "supply --reflectance"
        )
    frame, _ = standardize(frame, covs)
    columns = [c for c in ("calendar", "thermal", "ndvi", "greenup") if frame.has_column(c)]
    columns += [f"{c}_std" for c in covs]
    rows = [
        [int(s), int(d), *(_fmt(frame.column(c)[i]) for c in columns)]
        for i, (s, d) in enumerate(zip(frame.seasons, frame.days))
    ]
    _write_csv(resolved["output"], ["season", "day", *columns], rows)
    _echo_meta(resolved["output"], resolved)
    click.echo(f"wrote {len(rows)} feature rows to {resolved['output']}")


@cli.command()
@click.option("--input", "input_path", required=True, type=click.Path(),
              help="Series CSV: season,day,value (blank value = missing).")
@click.option("--lam", type=float, default=100.0, show_default=True, help="Whittaker penalty.")
@click.option("--output", required=True, type=click.Path())
def smooth(input_path, lam, output):
    """Whittaker-smooth a per-season daily series, filling missing entries."""
    with open(input_path, "r", newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or not {"season", "day", "value"} <= set(reader.fieldnames):
            raise DataError("smooth input needs columns season, day, value")
        records = [(int(r["season"]), int(r["day"]),
                    float(r["value"]) if r["value"].strip() else np.nan)
                   for r in reader]
    records.sort(key=lambda r: (r[0], r[1]))
    seasons = np.asarray([r[0] for r in records])
    days = np.asarray([r[1] for r in records])
    values = np.asarray([r[2] for r in records])
    out = np.empty_like(values)
    for s in np.unique(seasons):
        mask = seasons == s
        out[mask] = whittaker_smooth(values[mask], lam)
    rows = [[int(s), int(d), _fmt(v)] for s, d, v in zip(seasons, days, out)]
    _write_csv(output, ["season", "day", "value"], rows)
    _echo_meta(output, {"input": input_path, "lam": lam, "output": output})
    click.echo(f"wrote {len(rows)} smoothed rows to {output}")


@cli.command(name="simulate")
@click.option("--crop", type=click.Choice(sorted(CROP_PRESETS)), help="Preset scheme and cardinals.")
@click.option("--stages", help="Comma-separated stage labels (overrides the preset's).")
@click.option("--thresholds", required=True, help="Comma-separated decreasing stage thresholds.")
@click.option("--slope", "slopes", multiple=True, help="Ordinal slope, e.g. calendar=1.2 (repeatable).")
@click.option("--nominal-slope", "nominal_slopes", multiple=True,
              help="Per-stage slopes, e.g. thermal=0.5,0.8,0.2 (repeatable).")
@click.option("--link", type=click.Choice(["logit", "probit", "cauchit"]), default="probit", show_default=True)
@click.option("--family", type=click.Choice(["bcm", "mb"]), default="bcm", show_default=True)
@click.option("--setting", type=click.Choice(["calendar", "thermal"]), default="thermal", show_default=True)
@click.option("--n-trials", type=int, default=100, show_default=True)
@click.option("--seasons", type=int, default=20, show_default=True)
@click.option("--obs-days", type=int, default=20, show_default=True)
@click.option("--first-season", type=int, default=2001, show_default=True)
@click.option("--sd-intercepts", type=float, default=0.0, show_default=True,
              help="Seasonal random-intercept SD (all stages).")
@click.option("--sd-slope", "sd_slopes", multiple=True, help="Stage-slope SD, e.g. calendar=0.3.")
@click.option("--independent-draws", is_flag=True,
              help="Redraw plants each week instead of persisting them within a season.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--outdir", required=True, type=click.Path())
def simulate_cmd(crop, stages, thresholds, slopes, nominal_slopes, link, family,
                 setting, n_trials, seasons, obs_days, first_season, sd_intercepts,
                 sd_slopes, independent_draws, seed, outdir):
    """Simulate a panel, writing progress.csv, weather.csv and truth.json."""
    import os

    if crop:
        preset = crop_preset(crop)
        stage_labels = tuple(stages.split(",")) if stages else preset.stages
        cardinals = preset.cardinals
        name = crop
    else:
        if not stages:
            raise DataError("give --crop or --stages")
        stage_labels = tuple(s.strip() for s in stages.split(","))
        cardinals = CardinalTemperatures(8.0, 30.0, 36.0)
        name = "custom"
    scheme = StageScheme(name, stage_labels)
    nominal = {
        k: [float(x) for x in v.split(",")]
        for k, v in (p.partition("=")[::2] for p in nominal_slopes)
    }
    config = SimConfig(
        scheme=scheme,
        thresholds=tuple(float(t) for t in thresholds.split(",")),
        slopes=_parse_kv_floats(slopes, "--slope"),
        nominal_slopes=nominal,
        link=link, family=family, setting=setting, n_trials=n_trials,
        n_seasons=seasons, n_obs_days=obs_days, first_season=first_season,
        sd_intercepts=sd_intercepts,
        sd_slopes=_parse_kv_floats(sd_slopes, "--sd-slope"),
        plant_persistence=not independent_draws,
        seed=seed, cardinals=cardinals,
    )
    result = simulate(config)
    os.makedirs(outdir, exist_ok=True)
    progress_path = os.path.join(outdir, "progress.csv")
    weather_path = os.path.join(outdir, "weather.csv")
    write_progress(result.panel, progress_path)
    write_weather(result.weather, weather_path)
    resolved = {
        "crop": name, "stages": list(stage_labels),
        "thresholds": [float(t) for t in thresholds.split(",")],
        "slopes": _parse_kv_floats(slopes, "--slope"),
        "nominal_slopes": nominal, "link": link, "family": family,
        "setting": setting, "n_trials": n_trials, "seasons": seasons,
        "obs_days": obs_days, "first_season": first_season,
        "sd_intercepts": sd_intercepts,
        "sd_slopes": _parse_kv_floats(sd_slopes, "--sd-slope"),
        "plant_persistence": not independent_draws, "seed": seed,
        "t_base": cardinals.base, "t_optimal": cardinals.optimal,
        "t_ceiling": cardinals.ceiling,
    }
    with open(os.path.join(outdir, "truth.json"), "w", encoding="utf-8") as handle:
        json.dump(
            {"tool": {"name": "cropprogress", "version": __version__},
             "config": resolved, "truth": result.truth},
            handle, indent=2, sort_keys=True,
        )
        handle.write("\n")
    _echo_meta(progress_path, resolved)
    _echo_meta(weather_path, resolved)
    click.echo(f"wrote {progress_path}, {weather_path}, truth.json")


_FIT_DEFAULTS = {
    "progress": None, "weather": None, "reflectance": None, "crop": None,
    "stages": None, "t_base": None, "t_optimal": None, "t_ceiling": None,
    "lam": 100.0, "link": "logit", "family": "bcm", "setting": "thermal",
    "nominal": "", "n_trials": 100, "output": None,
}


def _fit_flags(progress, weather, reflectance, crop, stages, t_base, t_optimal,
               t_ceiling, lam, link, family, setting, n_trials, output):
    return {
        "progress": progress, "weather": weather, "reflectance": reflectance,
        "crop": crop, "stages": stages, "t_base": t_base,
        "t_optimal": t_optimal, "t_ceiling": t_ceiling, "lam": lam,
        "link": link, "family": family, "setting": setting,
        "n_trials": n_trials, "output": output,
    }


def _common_fit_options(fn):
    options = [
        click.option("--progress", type=click.Path(), help="Progress CSV: season,day,<stage columns> in percent."),
        click.option("--weather", type=click.Path(), help="Weather CSV: season,day,tmin,tmax."),
        click.option("--reflectance", type=click.Path(), help="Reflectance CSV: season,day,red,nir."),
        click.option("--crop", type=click.Choice(sorted(CROP_PRESETS))),
        click.option("--stages", help="Comma-separated stage labels (custom scheme)."),
        click.option("--t-base", type=float), click.option("--t-optimal", type=float),
        click.option("--t-ceiling", type=float),
        click.option("--lam", type=float, default=None, help="Whittaker penalty (default 100)."),
        click.option("--link", type=click.Choice(["logit", "probit", "cauchit"]), default=None),
        click.option("--family", type=click.Choice(["bcm", "mb"]), default=None),
        click.option("--setting", type=click.Choice(sorted(SETTINGS)), default=None),
        click.option("--n-trials", type=int, default=None),
        click.option("--config", "config_path", type=click.Path(), help="JSON config supplying defaults."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


@cli.command()
@_common_fit_options
@click.option("--nominal", default=None, help="Comma-separated covariates with per-stage effects.")
@click.option("--output", required=True, type=click.Path(), help="Model artifact (JSON).")
def fit(progress, weather, reflectance, crop, stages, t_base, t_optimal, t_ceiling,
        lam, link, family, setting, n_trials, config_path, nominal, output):
    """Fit a fixed-effects cumulative link model and write the artifact."""
    config = _load_config(config_path)
    flags = _fit_flags(progress, weather, reflectance, crop, stages, t_base,
                       t_optimal, t_ceiling, lam, link, family, setting,
                       n_trials, output)
    flags["nominal"] = nominal
    resolved = _resolve(config, flags, _FIT_DEFAULTS)
    for key in ("progress", "weather"):
        if not resolved[key]:
            raise DataError(f"--{key} is required")
    table, _, _, _ = _build_table(resolved)
    nominal_covs = tuple(
        c.strip() for c in str(resolved["nominal"]).split(",") if c.strip()
    )
    model = CumulativeLinkModel(
        link=resolved["link"], family=resolved["family"],
        setting=resolved["setting"], nominal=nominal_covs,
        n_trials=int(resolved["n_trials"]),
    ).fit(table)
    model.save(resolved["output"], config=resolved)
    click.echo(_wald_text(model))
    click.echo(f"model artifact written to {resolved['output']}")


def _wald_text(model):
    lines = [
        f"{'Parameter':<22}{'Estimate':>10}{'SE':>9}{'Wald z':>11}{'p':>9}",
    ]
    for row in model.wald_:
        lines.append(
            f"{row['name']:<22}{row['estimate']:>10.3f}{row['se']:>9.3f}"
            f"{row['z']:>9.3f} {row['marker']:<1}{row['p']:>8.2g}"
        )
    lines.append("Significance: . < 0.05, * < 0.001; SE from the clustered sandwich")
    return "\n".join(lines)


@cli.command(name="fit-mixed")
@_common_fit_options
@click.option("--stage-slopes", default=None,
              help='Covariates with stage-level random slopes: "auto", "none", or a comma list.')
@click.option("--no-seasonal-intercepts", is_flag=True)
@click.option("--no-se", is_flag=True, help="Skip the finite-difference standard errors.")
@click.option("--output", required=True, type=click.Path())
def fit_mixed(progress, weather, reflectance, crop, stages, t_base, t_optimal,
              t_ceiling, lam, link, family, setting, n_trials, config_path,
              stage_slopes, no_seasonal_intercepts, no_se, output):
    """Fit the mixed-effects model (seasonal intercepts, stage slopes)."""
    config = _load_config(config_path)
    flags = _fit_flags(progress, weather, reflectance, crop, stages, t_base,
                       t_optimal, t_ceiling, lam, link, family, setting,
                       n_trials, output)
    flags["stage_slopes"] = stage_slopes
    defaults = dict(_FIT_DEFAULTS, stage_slopes="auto", link="probit")
    resolved = _resolve(config, flags, defaults)
    for key in ("progress", "weather"):
        if not resolved[key]:
            raise DataError(f"--{key} is required")
    table, _, _, _ = _build_table(resolved)
    raw_slopes = resolved["stage_slopes"]
    if raw_slopes == "auto":
        slope_arg = "auto"
    elif raw_slopes in ("none", ""):
        slope_arg = ()
    else:
        slope_arg = tuple(c.strip() for c in str(raw_slopes).split(",") if c.strip())
    model = MixedCumulativeLinkModel(
        link=resolved["link"], family=resolved["family"],
        setting=resolved["setting"], n_trials=int(resolved["n_trials"]),
        seasonal_intercepts=not no_seasonal_intercepts,
        stage_slopes=slope_arg, compute_se=not no_se,
    ).fit(table)
    model.save(resolved["output"], config=resolved)
    click.echo(model.summary())
    if model.dropped_terms_:
        click.echo(f"note: dropped collapsed random terms: {model.dropped_terms_}")
    click.echo(f"model artifact written to {resolved['output']}")


@cli.command()
@click.option("--model", "model_path", required=True, type=click.Path(), help="Model artifact JSON.")
@click.option("--weather", type=click.Path(), help="Weather CSV (defaults from the artifact config are used for cardinals/lam).")
@click.option("--reflectance", type=click.Path())
@click.option("--seasons", help="Comma-separated season filter.")
@click.option("--days", help="Comma-separated day filter.")
@click.option("--output", required=True, type=click.Path(), help="Prediction CSV (percent).")
def predict(model_path, weather, reflectance, seasons, days, output):
    """Predict progress curves; mixed artifacts interpolate training seasons."""
    model = load_model(model_path)
    with open(model_path, "r", encoding="utf-8") as handle:
        artifact = json.load(handle)
    config = artifact.get("config", {})
    weather_path = weather or config.get("weather")
    if not weather_path:
        raise DataError("--weather is required (not found in the artifact config)")
    cardinals = CardinalTemperatures(
        float(config.get("t_base", crop_preset(config["crop"]).cardinals.base if config.get("crop") else 8.0)),
        float(config.get("t_optimal", crop_preset(config["crop"]).cardinals.optimal if config.get("crop") else 30.0)),
        float(config.get("t_ceiling", crop_preset(config["crop"]).cardinals.ceiling if config.get("crop") else 36.0)),
    )
    weather_series = load_weather(weather_path)
    reflectance_path = reflectance or config.get("reflectance")
    reflectance_series = load_reflectance(reflectance_path) if reflectance_path else None
    frame = build_features(
        weather_series, cardinals, reflectance_series,
        lam=float(config.get("lam", 100.0)),
    )
    season_filter = [int(s) for s in seasons.split(",")] if seasons else None
    day_filter = [int(d) for d in days.split(",")] if days else None
    if isinstance(model, MixedCumulativeLinkModel):
        predicted = model.interpolate(frame, seasons=season_filter)
        if day_filter is not None:
            mask = np.isin(predicted.days, day_filter)
            predicted = type(predicted)(
                predicted.stages, predicted.seasons[mask], predicted.days[mask],
                predicted.values[mask],
            )
    else:
        predicted = model.predict(frame, seasons=season_filter, days=day_filter)
    header = ["season", "day", *predicted.stages]
    rows = [
        [int(s), int(d), *(_fmt(100.0 * v) for v in vals[1:])]
        for s, d, vals in zip(predicted.seasons, predicted.days, predicted.values)
    ]
    _write_csv(output, header, rows)
    _echo_meta(output, {"model": model_path, "weather": weather_path,
                        "seasons": seasons, "days": days})
    click.echo(f"wrote {len(rows)} prediction rows to {output}")


@cli.command()
@_common_fit_options
@click.option("--links", default="logit,probit,cauchit", show_default=True,
              help="Links to include in the grid.")
@click.option("--replicates", type=int, default=None, help="Monte-Carlo replicates (default 500).")
@click.option("--train-frac", type=float, default=None, help="Training fraction (default 0.75).")
@click.option("--seed", type=int, default=None, help="Partition seed (default 0).")
@click.option("--threads", type=int, default=1, show_default=True, help="Worker threads for replicates.")
@click.option("--output", required=True, type=click.Path(), help="Ranked grid CSV.")
@click.option("--figure-data", type=click.Path(),
              help="Also write the best cell's per-stage error series (stacked-bar data).")
def cv(progress, weather, reflectance, crop, stages, t_base, t_optimal, t_ceiling,
       lam, link, family, setting, n_trials, config_path, links, replicates,
       train_frac, seed, threads, output, figure_data):
    """Cross-validated model selection over links and effect structures."""
    config = _load_config(config_path)
    flags = _fit_flags(progress, weather, reflectance, crop, stages, t_base,
                       t_optimal, t_ceiling, lam, link, family, setting,
                       n_trials, output)
    flags.update({"links": links, "replicates": replicates,
                  "train_frac": train_frac, "seed": seed})
    defaults = dict(_FIT_DEFAULTS, links="logit,probit,cauchit",
                    replicates=500, train_frac=0.75, seed=0)
    resolved = _resolve(config, flags, defaults)
    for key in ("progress", "weather"):
        if not resolved[key]:
            raise DataError(f"--{key} is required")
    table, _, _, _ = _build_table(resolved)
    plan = CvPlan(
        n_replicates=int(resolved["replicates"]),
        train_fraction=float(resolved["train_frac"]),
        seed=int(resolved["seed"]),
    )
    link_list = tuple(l.strip() for l in str(resolved["links"]).split(",") if l.strip())
    cells = selection_grid(
        table, resolved["family"], resolved["setting"], plan,
        links=link_list, n_trials=int(resolved["n_trials"]), n_workers=threads,
    )
    rows = []
    for rank, cell in enumerate(cells, start=1):
        if cell.failed:
            rows.append([rank, cell.link, cell.code, ",".join(cell.nominal) or "-",
                         "failed", 0, 0, 1])
        else:
            rows.append([rank, cell.link, cell.code, ",".join(cell.nominal) or "-",
                         f"{cell.report.average_percent:.4f}", cell.report.n_replicates,
                         cell.report.n_failures, int(cell.report.flagged)])
    _write_csv(output, ["rank", "link", "code", "nominal", "avg_rmspe_pct",
                        "replicates", "failures", "flagged"], rows)
    _echo_meta(output, resolved)
    best = cells[0]
    if best.failed:
        raise FitError("every grid cell failed to fit")
    click.echo(_grid_text(cells, resolved))
    if figure_data:
        report = best.report
        fig_rows = []
        stage_labels = table.scheme.stages
        for i, day in enumerate(report.days):
            fig_rows.append([int(day), "pooled", _fmt(100.0 * report.pooled[i]),
                             int(report.day_replicate_counts[i])])
            for k, label in enumerate(stage_labels):
                fig_rows.append([int(day), label, _fmt(100.0 * report.per_stage[i, k]),
                                 int(report.day_replicate_counts[i])])
        _write_csv(figure_data, ["day", "series", "rmspe_pct", "replicates"], fig_rows)
        _echo_meta(figure_data, dict(resolved, best_code=best.code))
        click.echo(f"figure data for {best.code} written to {figure_data}")


def _grid_text(cells, resolved):
    lines = [
        f"Average RMSPE (%), {resolved['family']} family, {resolved['setting']} setting",
        f"{'rank':<6}{'code':<10}{'RMSPE %':>9}  {'failures':>8}",
    ]
    for rank, cell in enumerate(cells, start=1):
        if cell.failed:
            lines.append(f"{rank:<6}{cell.code:<10}{'failed':>9}")
            continue
        flag = "  [flagged]" if cell.report.flagged else ""
        lines.append(
            f"{rank:<6}{cell.code:<10}{cell.report.average_percent:>9.2f}"
            f"  {cell.report.n_failures:>8}{flag}"
        )
    lines.append("code: link letter + one glyph per covariate "
                 "(filled = ordinal, hollow = nominal)")
    return "\n".join(lines)


@cli.command(name="requirements")
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--season", type=int, help="Season-specific requirements (mixed models).")
@click.option("--output", type=click.Path(), help="Optional CSV output.")
def requirements_cmd(model_path, season, output):
    """Print the per-stage transition requirements of a fitted model."""
    model = load_model(model_path)
    reqs = requirements(model, season=season)
    lines = [f"{'transition':<40}{'delta':>10}{'|delta|':>10}"]
    for r in reqs:
        lines.append(f"{r.from_stage + ' -> ' + r.to_stage:<40}{r.delta:>10.3f}{r.magnitude:>10.3f}")
    click.echo("\n".join(lines))
    if output:
        _write_csv(
            output,
            ["from_stage", "to_stage", "delta", "magnitude", "season"],
            [[r.from_stage, r.to_stage, _fmt(r.delta), _fmt(r.magnitude),
              "" if r.season is None else r.season] for r in reqs],
        )
        _echo_meta(output, {"model": model_path, "season": season})


@cli.command(name="transition-time")
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--stage", required=True, help="Target stage label.")
@click.option("--gdd-rate", type=float, help="Constant daily GDD rate in [0, 1].")
@click.option("--weather", type=click.Path(),
              help="Weather CSV for the variable-rate mode (accumulated from its first day).")
@click.option("--season", type=int, help="Use this season's predicted random effects.")
@click.option("--target-days", type=float,
              help="Instead solve for the GDD rate meeting this transition time.")
def transition_time_cmd(model_path, stage, gdd_rate, weather, season, target_days):
    """Days to complete a stage transition, or the GDD rate meeting a target."""
    model = load_model(model_path)
    if target_days is not None:
        rate = required_gdd_rate(model, stage, target_days, season=season)
        click.echo(
            f"required constant GDD rate for {stage!r} in {target_days:g} days: {rate:.6f}"
        )
        return
    if weather is not None:
        with open(model_path, "r", encoding="utf-8") as handle:
            config = json.load(handle).get("config", {})
        cardinals = CardinalTemperatures(
            float(config.get("t_base", 8.0)),
            float(config.get("t_optimal", 30.0)),
            float(config.get("t_ceiling", 36.0)),
        )
        days = transition_time(
            model, stage, season=season,
            weather=load_weather(weather), cardinals=cardinals,
        )
        click.echo(
            f"transition into {stage!r} takes {days:.3f} days accumulating the "
            "supplied weather from its first day"
        )
        return
    if gdd_rate is None:
        raise DataError("give --gdd-rate, --weather, or --target-days")
    days = transition_time(model, stage, gdd_rate=gdd_rate, season=season)
    click.echo(
        f"transition into {stage!r} takes {days:.3f} days at a constant daily "
        f"GDD rate of {gdd_rate:g} (constant-conditions assumption)"
    )


@cli.command()
@click.option("--cv-table", type=click.Path(), help="Grid CSV from the cv command.")
@click.option("--model", "model_path", type=click.Path(), help="Model artifact JSON.")
@click.option("--figure-data", type=click.Path(),
              help="With --model: write daily fitted curves (long format) for plotting.")
@click.option("--weather", type=click.Path(),
              help="Weather CSV for --figure-data (defaults to the artifact config).")
def report(cv_table, model_path, figure_data, weather):
    """Render artifacts as text tables (selection grid, coefficient tables)."""
    if not cv_table and not model_path:
        raise DataError("give --cv-table and/or --model")
    if cv_table:
        with open(cv_table, "r", newline="", encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
        lines = [f"{'rank':<6}{'code':<10}{'RMSPE %':>9}  {'failures':>9}"]
        for row in rows:
            try:
                value = f"{float(row['avg_rmspe_pct']):>9.2f}"
            except ValueError:
                value = f"{row['avg_rmspe_pct']:>9}"
            lines.append(f"{row['rank']:<6}{row['code']:<10}{value}  {row['failures']:>9}")
        click.echo("\n".join(lines))
    if model_path:
        model = load_model(model_path)
        if isinstance(model, MixedCumulativeLinkModel):
            click.echo(model.summary())
        else:
            click.echo(_wald_text(model))
        if figure_data:
            with open(model_path, "r", encoding="utf-8") as handle:
                config = json.load(handle).get("config", {})
            weather_path = weather or config.get("weather")
            if not weather_path:
                raise DataError("--figure-data needs --weather or an artifact config")
            cardinals = CardinalTemperatures(
                float(config.get("t_base", 8.0)),
                float(config.get("t_optimal", 30.0)),
                float(config.get("t_ceiling", 36.0)),
            )
            frame = build_features(
                load_weather(weather_path), cardinals,
                load_reflectance(config["reflectance"]) if config.get("reflectance") else None,
                lam=float(config.get("lam", 100.0)),
            )
            if isinstance(model, MixedCumulativeLinkModel):
                predicted = model.interpolate(frame)
            else:
                predicted = model.predict(frame)
            rows = []
            for s, d, values in zip(predicted.seasons, predicted.days, predicted.values):
                for stage, value in zip(predicted.stages, values[1:]):
                    rows.append([int(s), int(d), stage, _fmt(100.0 * value)])
            _write_csv(figure_data, ["season", "day", "stage", "fitted_pct"], rows)
            _echo_meta(figure_data, {"model": model_path, "weather": weather_path})
            click.echo(f"figure data written to {figure_data}")


def _emit_error(kind, exc):
    if _JSON_ERRORS:
        payload = {"error": kind, "message": str(exc)}
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    else:
        print(f"error: {exc}", file=sys.stderr)


def main(argv=None):
    """Entry point with the documented exit-code contract."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    except click.ClickException as exc:
        _emit_error("usage", exc.format_message())
        ctx = getattr(exc, "ctx", None)
        if ctx is not None:
            print(ctx.get_help(), file=sys.stderr)
        return 1
    except DataError as exc:
        _emit_error("validation", exc)
        return 1
    except FitError as exc:
        _emit_error("numerical", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
