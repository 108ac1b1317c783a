"""Command-line interface: ``simulate``, ``fit``, ``coverage``, ``predict`` and ``report``.

Settings come from a JSON experiment file (``--config``; the packaged
``monte_carlo`` config when omitted).  Command-line flags override the file,
and the file overrides built-in defaults.  The worker count falls back to the
``DEEPCHOICE_WORKERS`` environment variable, then to 1.

Exit codes: 0 success, 2 invalid arguments, configuration or input files,
3 failure while running (divergence, too many failed replications, ...).
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import inference as I
from . import model as M
from . import sampler as S
from . import simulation as SIM

log = logging.getLogger("deepchoice")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
WORKERS_ENV = "DEEPCHOICE_WORKERS"
CONFIG_FORMAT = "deepchoice-experiment"
CONFIG_VERSION = 1
COVERAGE_FORMAT = "deepchoice-coverage"
COVERAGE_VERSION = 1
DELIM = "\t"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int
    dgp: SIM.DgpSpec
    model: dict
    sampler: S.SgldConfig
    studies: list
    inference: SIM.StudyOptions
    data: dict | None = None
    fit: dict = field(default_factory=dict)
    vott: dict | None = None
    output: str | None = None
    workers: int | None = None

    def resolved(self):
        """Canonical dictionary of everything that affects results."""
        return {
            "format": CONFIG_FORMAT,
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "dgp": self.dgp.to_dict(),
            "model": self.model,
            "sampler": self.sampler.to_dict(),
            "studies": self.studies,
            "inference": asdict(self.inference),
            "data": self.data,
            "fit": self.fit,
            "vott": self.vott,
        }

    def digest(self):
        blob = json.dumps(self.resolved(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def model_spec(self, kind, J, Kx, Kq):
        return M.ModelSpec(kind=kind, n_alternatives=J, n_attributes=Kx, n_characteristics=Kq, **self.model)


def packaged_config(name="monte_carlo"):
    text = resources.files("deepchoice").joinpath(f"configs/{name}.json").read_text()
    return json.loads(text)


def _grid(spec):
    if isinstance(spec, list) and len(spec) == 3 and isinstance(spec[2], int):
        return np.linspace(spec[0], spec[1], spec[2]).tolist()
    return [float(v) for v in spec]


def parse_config(raw, base_dir=None):
    """Validate a raw config dictionary and build an :class:`ExperimentConfig`."""
    raw = copy.deepcopy(raw)
    if raw.get("format") != CONFIG_FORMAT:
        raise ConfigError(f"config format must be {CONFIG_FORMAT!r}")
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {raw.get('version')!r}")
    if not isinstance(raw.get("seed"), int):
        raise ConfigError("config needs an integer 'seed'")
    seed = raw["seed"]
    try:
        dgp = SIM.DgpSpec.from_dict({**raw.get("dgp", {}), "seed": seed})
        sampler = S.SgldConfig.from_dict({**raw.get("sampler", {}), "seed": seed})
        inf = dict(raw.get("inference", {}))
        if "band_grid" in inf:
            inf["band_grid"] = _grid(inf["band_grid"])
        options = SIM.StudyOptions(**inf)
        model = dict(raw.get("model", {}))
        M.ModelSpec(kind="proposed", n_alternatives=2, n_attributes=1, n_characteristics=1, **model)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    if options.aggregate not in I.AGGREGATES:
        raise ConfigError(f"inference.aggregate must be one of {I.AGGREGATES}")
    studies = raw.get("studies") or [{"n_obs": dgp.n_obs, "replications": dgp.replications, "kinds": list(M.KINDS)}]
    for st in studies:
        if set(st) - {"n_obs", "replications", "kinds"}:
            raise ConfigError(f"unknown study keys {sorted(set(st) - {'n_obs', 'replications', 'kinds'})}")
        if st["replications"] > dgp.replications:
            raise ConfigError("a study asks for more replications than dgp.replications allows")
        for kind in st["kinds"]:
            if kind not in M.KINDS:
                raise ConfigError(f"unknown model kind {kind!r}")
    data = raw.get("data")
    if data is not None:
        data = dict(data)
        data["path"] = str(_resolve(data["path"], base_dir))
        if data.get("schema", "swiss") != "swiss":
            data["schema"] = str(_resolve(data["schema"], base_dir))
    return ExperimentConfig(
        seed=seed,
        dgp=dgp,
        model=model,
        sampler=sampler,
        studies=studies,
        inference=options,
        data=data,
        fit=dict(raw.get("fit", {})),
        vott=raw.get("vott"),
        output=raw.get("output"),
        workers=raw.get("workers"),
    )


def _resolve(path, base_dir):
    p = Path(path)
    if not p.is_absolute() and base_dir is not None and not p.exists():
        p = Path(base_dir) / p
    return p


def load_config(path=None):
    if path is None:
        return parse_config(packaged_config())
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return parse_config(raw, base_dir=Path(path).parent)


def check_files(cfg):
    """Referenced input files must exist before any work starts."""
    if cfg.data is None:
        return
    if not Path(cfg.data["path"]).is_file():
        raise ConfigError(f"data file not found: {cfg.data['path']}")
    schema = cfg.data.get("schema", "swiss")
    if schema != "swiss" and not Path(schema).is_file():
        raise ConfigError(f"schema file not found: {schema}")


def resolve_workers(flag, cfg):
    if flag is not None:
        n = flag
    elif cfg is not None and cfg.workers is not None:
        n = cfg.workers
    else:
        try:
            n = int(os.environ.get(WORKERS_ENV, "1"))
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer") from None
    if n < 1:
        raise ConfigError("worker count must be at least 1")
    return n


# ---------------------------------------------------------------------------
# Output helpers


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path, kind, config_hash, columns, rows):
    """Delimiter-separated table with a one-line comment header carrying the config hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# deepchoice {kind} v1 config={config_hash}\n")
        fh.write(DELIM.join(columns) + "\n")
        for row in rows:
            fh.write(DELIM.join(_fmt(v) for v in row) + "\n")
    return path


def read_table(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    meta = lines[0]
    columns = lines[1].split(DELIM)
    return meta, columns, [ln.split(DELIM) for ln in lines[2:] if ln]


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _out_dir(flag, cfg, default):
    out = Path(flag or (cfg.output if cfg is not None and cfg.output else default))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


# ---------------------------------------------------------------------------
# Commands


def _ensure(out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(cfg, out, replications=None, n_obs=None):
    """Write synthetic data sets plus truth sidecars and a manifest."""
    out = _ensure(out)
    study = cfg.studies[0]
    n = n_obs or study["n_obs"]
    reps = replications if replications is not None else study["replications"]
    digest = cfg.digest()
    base = cfg.inference.base_attribute
    files = []
    for r in range(reps):
        sim = SIM.generate_dataset(cfg.dgp, r, n_obs=n)
        data_path = out / f"dataset_r{r:03d}.csv"
        D.write_wide_csv(sim.data, data_path)
        truth = {
            "format": "deepchoice-truth",
            "version": 1,
            "config_hash": digest,
            "replication": r,
            "n_obs": n,
            "shares": sim.shares.tolist(),
            "base_attribute": base,
            "aggregate": cfg.inference.aggregate,
            "mrs": [
                {"attribute": l, "truth": SIM.true_mrs(cfg.dgp, sim.data.x, sim.data.q, base, l, cfg.inference.aggregate)}
                for l in range(cfg.dgp.n_attributes)
                if l != base
            ],
        }
        truth_path = write_json(out / f"truth_r{r:03d}.json", truth)
        files += [data_path.name, truth_path.name]
    write_json(out / "manifest.json", {"config_hash": digest, "config": cfg.resolved(), "files": files})
    return files


def _load_dataset(cfg):
    schema = D.swiss_schema() if cfg.data.get("schema", "swiss") == "swiss" else D.load_schema(cfg.data["schema"])
    return D.load_wide_csv(cfg.data["path"], schema)


def _standardization_dict(stats):
    return None if stats is None else {k: v.tolist() for k, v in asdict(stats).items()}


def _standardization_from(d):
    return None if not d else D.Standardization(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def cmd_fit(cfg, out, kind=None, replication=None, n_obs=None):
    """Fit one model and write its chain, metrics and (if configured) VOTT summary."""
    out = _ensure(out)
    kind = kind or cfg.fit.get("kind", "proposed")
    if kind not in M.KINDS:
        raise ConfigError(f"unknown model kind {kind!r}")
    digest = cfg.digest()
    truth_rows = None
    dropped = 0
    if cfg.data is not None:
        full = _load_dataset(cfg)
        dropped = full.dropped
        train, test = D.split(full, cfg.data.get("holdout_fraction", 0.2), cfg.seed)
        if cfg.data.get("standardize", True):
            stats = D.fit_standardization(train)
            train, test = D.standardize(train, stats), D.standardize(test, stats)
    else:
        r = replication if replication is not None else cfg.fit.get("replication", 0)
        n = n_obs or cfg.fit.get("n_obs", cfg.studies[0]["n_obs"])
        sim = SIM.generate_dataset(cfg.dgp, r, n_obs=n)
        tr, te = D.split_indices(sim.data.y, cfg.dgp.holdout_fraction, [cfg.dgp.seed, r, 7])
        train, test = sim.data.subset(tr), sim.data.subset(te)
        base = cfg.inference.base_attribute
        truth_rows = {l: SIM.true_mrs(cfg.dgp, test.x, test.q, base, l, cfg.inference.aggregate) for l in range(cfg.dgp.n_attributes) if l != base}
    spec = cfg.model_spec(kind, train.n_alternatives, train.n_attributes, train.n_characteristics)
    chain = S.run_two_step(spec, train, cfg.sampler)
    chain.meta = {"config_hash": digest, "standardization": _standardization_dict(train.stats), "attributes": train.attributes}
    S.save_chain(chain, out / "chain.jsonl")

    probs = I.posterior_predictive(chain, test.x, test.q)
    metrics = {
        "format": "deepchoice-metrics",
        "version": 1,
        "config_hash": digest,
        "model": kind,
        "n_train": len(train),
        "n_test": len(test),
        "dropped_rows": dropped,
        "snapshots": len(chain),
        "phase1_epochs": chain.phase1_epochs,
        "balanced_accuracy": I.balanced_accuracy(probs, test.y),
        "accuracy": I.accuracy(probs, test.y),
        "mean_log_likelihood": float(np.mean(np.log(probs[np.arange(len(test)), test.y]))),
    }
    grads = I.input_gradients(chain, test.x, test.q, raw_scale=None if test.stats is None else test.stats.x_scale)
    if truth_rows is not None:
        rows = []
        for l, truth in truth_rows.items():
            est = I.mrs(chain, test, cfg.inference.base_attribute, l, cfg.inference.level, grads=grads, aggregate=cfg.inference.aggregate)
            rows.append((l, est.interval[0], est.interval[1], est.point, truth, est.interval[0] <= truth <= est.interval[1]))
        write_table(out / "mrs.tsv", "mrs", digest, ["attribute", "lower", "upper", "point", "truth", "hit"], rows)
    if cfg.vott:
        names = list(train.attributes)
        try:
            t_attr, c_attr = names.index(cfg.vott["time"]), names.index(cfg.vott["cost"])
        except ValueError:
            raise ConfigError(f"vott attributes {cfg.vott} not among {names}") from None
        v = I.vott(chain, test, t_attr, c_attr, cfg.vott.get("minutes_per_hour", 60.0), grads=grads)
        metrics["vott_median"] = v.median
        metrics["vott_median_by_alternative"] = v.median_by_alternative.tolist()
        metrics["vott_quantiles"] = {str(k): val for k, val in v.quantiles.items()}
        counts, edges = v.histogram
        write_table(out / "vott_histogram.tsv", "vott-histogram", digest, ["left", "right", "count"], [(edges[i], edges[i + 1], int(c)) for i, c in enumerate(counts)])
        write_table(out / "vott_values.tsv", "vott-values", digest, ["row"] + list(train.alternatives), [(i, *row) for i, row in enumerate(v.values)])
    write_json(out / "metrics.json", metrics)
    return metrics


def cmd_predict(chain_path, data_path, schema, out):
    """Posterior-predictive probabilities for a labelled wide CSV."""
    out = _ensure(out)
    chain = S.load_chain(chain_path)
    schema = D.swiss_schema() if schema in (None, "swiss") else D.load_schema(schema)
    data = D.load_wide_csv(data_path, schema)
    stats = _standardization_from(chain.meta.get("standardization"))
    if stats is not None:
        data = D.standardize(data, stats)
    probs = I.posterior_predictive(chain, data.x, data.q)
    digest = chain.meta.get("config_hash", chain.spec.digest())
    J = probs.shape[1]
    write_table(
        out / "predictions.tsv",
        "predictions",
        digest,
        ["row"] + [f"p_{a}" for a in data.alternatives] + ["predicted", "chosen"],
        [(i, *probs[i], int(np.argmax(probs[i])), int(data.y[i])) for i in range(len(data))],
    )
    metrics = {
        "format": "deepchoice-metrics",
        "version": 1,
        "config_hash": digest,
        "model": chain.spec.kind,
        "n": len(data),
        "alternatives": J,
        "balanced_accuracy": I.balanced_accuracy(probs, data.y),
        "accuracy": I.accuracy(probs, data.y),
        "mean_log_likelihood": float(np.mean(np.log(probs[np.arange(len(data)), data.y]))),
    }
    write_json(out / "predict_metrics.json", metrics)
    return metrics


def run_coverage(cfg, workers=1):
    runs = []
    for st in cfg.studies:
        specs = [cfg.model_spec(k, cfg.dgp.n_alternatives, cfg.dgp.n_attributes, cfg.dgp.n_characteristics) for k in st["kinds"]]
        report = SIM.run_monte_carlo(cfg.dgp, specs, cfg.sampler, [st["n_obs"]], st["replications"], workers, cfg.inference)
        runs.extend(report.runs)
    return SIM.CoverageReport(runs)


def _run_record(r):
    d = asdict(r)
    d.pop("seconds")
    if d["bands"] is not None:
        d["bands"] = {str(k): v for k, v in d["bands"].items()}
    return d


def _run_from_record(d):
    d = dict(d)
    if d.get("bands") is not None:
        d["bands"] = {int(k): v for k, v in d["bands"].items()}
    return SIM.ModelRun(**d)


def write_coverage_outputs(report, out, digest, config):
    """The two result tables plus per-replication rows, band widths, band plot data and a summary."""
    n_mrs = max((len(r.mrs) for r in report.completed()), default=0)
    cov_cols = ["model", "dataset_size"] + [f"mrs_{m + 1}" for m in range(n_mrs)] + ["average"]
    write_table(out / "coverage.tsv", "coverage", digest, cov_cols, [(m, n, *c, avg) for m, n, c, avg in report.coverage_table()])
    write_table(
        out / "accuracy.tsv", "accuracy", digest, ["model", "dataset_size", "balanced_accuracy", "accuracy"], report.accuracy_table()
    )
    rows = []
    for r in report.runs:
        for m in r.mrs:
            rows.append((r.model, r.n_obs, r.replication, m["index"], m["attribute"], m["lower"], m["upper"], m["point"], m["truth"], m["hit"], m["flagged"]))
    write_table(
        out / "replications.tsv",
        "replications",
        digest,
        ["model", "dataset_size", "replication", "mrs", "attribute", "lower", "upper", "point", "truth", "hit", "flagged"],
        rows,
    )
    widths = report.band_widths()
    write_table(
        out / "band_widths.tsv",
        "band-widths",
        digest,
        ["model", "dataset_size", "attribute", "mean_width"],
        [(m, n, k, w) for (m, n), d in widths.items() for k, w in d.items()],
    )
    seen = set()
    for r in report.completed():
        if not r.bands or (r.model, r.n_obs) in seen:
            continue
        seen.add((r.model, r.n_obs))
        for k, b in r.bands.items():
            write_table(
                out / "bands" / f"band_{r.model}_{r.n_obs}_x{k + 1}.tsv",
                "band",
                digest,
                ["grid", "lower", "mean", "upper", "truth"],
                zip(b["grid"], b["lower"], b["mean"], b["upper"], b["truth"]),
            )
    failures = [{"model": r.model, "dataset_size": r.n_obs, "replication": r.replication, "error": r.error} for r in report.runs if r.error]
    summary = {
        "format": COVERAGE_FORMAT,
        "version": COVERAGE_VERSION,
        "config_hash": digest,
        "config": config,
        "failures": failures,
        "runs": [_run_record(r) for r in report.runs],
    }
    write_json(out / "summary.json", summary)
    return summary


def cmd_coverage(cfg, out, workers=1):
    out = _ensure(out)
    report = run_coverage(cfg, workers)
    write_coverage_outputs(report, out, cfg.digest(), cfg.resolved())
    return report


def cmd_report(inputs, out):
    """Merge coverage summaries into consolidated tables and plot data."""
    out = _ensure(out)
    if not inputs:
        raise ConfigError("report needs at least one summary.json input")
    runs, hashes = [], []
    for path in inputs:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        if doc.get("format") != COVERAGE_FORMAT or doc.get("version") != COVERAGE_VERSION:
            raise ConfigError(f"{path}: expected {COVERAGE_FORMAT} v{COVERAGE_VERSION}")
        hashes.append(doc["config_hash"])
        runs.extend(_run_from_record(r) for r in doc["runs"])
    digest = hashlib.sha256("|".join(hashes).encode()).hexdigest()[:16]
    report = SIM.CoverageReport(runs)
    write_coverage_outputs(report, out, digest, {"merged": hashes})
    return report


# ---------------------------------------------------------------------------
# Entry point


def build_parser():
    p = argparse.ArgumentParser(prog="deepchoice", description="Bayesian knowledge-informed choice models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON file (default: packaged monte_carlo config)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--workers", type=int, help=f"worker processes (default: config, then ${WORKERS_ENV}, then 1)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write synthetic data sets and truth files")
    s.add_argument("--replications", type=int)
    s.add_argument("--n-obs", type=int)

    f = sub.add_parser("fit", parents=[common], help="fit one model, write chain and metrics")
    f.add_argument("--kind", choices=M.KINDS)
    f.add_argument("--replication", type=int, help="synthetic replication (when the config has no data section)")
    f.add_argument("--n-obs", type=int)
    f.add_argument("--data", help="wide CSV to fit instead of synthetic data")
    f.add_argument("--schema", help="schema JSON, or 'swiss' (default)")

    sub.add_parser("coverage", parents=[common], help="run the Monte Carlo coverage study")

    pr = sub.add_parser("predict", parents=[common], help="posterior-predictive probabilities from a chain")
    pr.add_argument("--chain", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--schema")

    r = sub.add_parser("report", parents=[common], help="merge coverage summaries")
    r.add_argument("inputs", nargs="*", help="summary.json files written by 'coverage'")
    return p


def _with_overrides(args):
    cfg_path = args.config
    raw = packaged_config() if cfg_path is None else None
    cfg = load_config(cfg_path) if raw is None else parse_config(raw)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.dgp = replace(cfg.dgp, seed=args.seed)
        cfg.sampler = replace(cfg.sampler, seed=args.seed)
    if getattr(args, "data", None) and args.command == "fit":
        cfg.data = {**(cfg.data or {}), "path": args.data, "schema": args.schema or (cfg.data or {}).get("schema", "swiss")}
    return cfg


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            out = _out_dir(args.out, None, "results/report")
            cmd_report(args.inputs, out)
            return EXIT_OK
        if args.command == "predict":
            for path in (args.chain, args.data):
                if not Path(path).is_file():
                    raise ConfigError(f"file not found: {path}")
            out = _out_dir(args.out, None, "results/predict")
            cmd_predict(args.chain, args.data, args.schema, out)
            return EXIT_OK
        cfg = _with_overrides(args)
        check_files(cfg)
        workers = resolve_workers(args.workers, cfg)
        out = _out_dir(args.out, cfg, f"results/{args.command}")
        if args.command == "simulate":
            cmd_simulate(cfg, out, args.replications, args.n_obs)
        elif args.command == "fit":
            cmd_fit(cfg, out, args.kind, args.replication, args.n_obs)
        elif args.command == "coverage":
            cmd_coverage(cfg, out, workers)
        return EXIT_OK
    except (ConfigError, D.DataError) as exc:
        print(f"deepchoice: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"deepchoice: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
