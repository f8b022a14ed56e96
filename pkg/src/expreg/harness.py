"""Command-line experiment runner: ``expreg train|ntk|verify|sweep``.

A run is described by one JSON document (:class:`ExperimentConfig`); any
field can be overridden on the command line as ``--<field> <value>``.
All output files of a command are computed in memory first and then
written atomically, so a failed run leaves no partial files behind.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import theory
from .datamodel import (
    DATASET_KINDS,
    Dataset,
    HyperParams,
    ParameterDomainError,
    PreconditionError,
    RangeError,
    StructuralError,
    derive_rng,
    empirical_B,
    gen_dataset,
    init_standard,
    init_state,
    read_dataset,
)
from .kernel import fro_norm, h_cts_closed, h_cts_mc, h_dis, inf_norm, kernel_csv_text, lambda_min, spectral_norm
from .training import trace_csv_text, train

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

# verify needs a bounded run; the formula step count is far out of reach
VERIFY_DEFAULT_STEPS = 200
M_STAR_CAP = 2_000_000


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    n: int = 8
    d: int = 8
    m: int = 4000
    sigma: float = 0.25
    C: float = 11.0
    delta: float = 0.05
    eps: float = 0.01
    R: float = 0.005
    eta: float | None = None
    T: int | None = None
    B: float | None = None
    b_source: str = "empirical"
    eta_source: str = "paper-formula"
    dataset_kind: str = "normalized_gaussian"
    dataset_seed: int = 0
    dataset_file: str | None = None
    label_file: str | None = None
    init_mode: str = "paired"
    seeds: list = field(default_factory=lambda: [0])
    m_grid: list = field(default_factory=lambda: [100, 400, 1600])
    sigma_grid: list | None = None
    trials: int = 20
    record_kernel_every: int = 0
    early_stop: bool = True
    max_steps: int | None = None
    max_seconds: float | None = None
    mc_samples: int = 100_000

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.dataset_file is None and self.dataset_kind not in DATASET_KINDS:
            raise ConfigError(f"dataset_kind must be one of {DATASET_KINDS}")
        if self.init_mode not in ("paired", "standard"):
            raise ConfigError("init_mode must be 'paired' or 'standard'")
        if int(self.trials) < 1:
            raise ConfigError("trials must be >= 1")
        if int(self.mc_samples) < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.max_steps is not None and int(self.max_steps) < 0:
            raise ConfigError("max_steps must be nonnegative")
        if self.label_file is not None and self.dataset_file is None:
            raise ConfigError("label_file requires dataset_file")

    def hyperparams(self, n: int, d: int, m: int | None = None, sigma: float | None = None) -> HyperParams:
        T = self.T
        if self.max_steps is not None:
            T = self.max_steps if T is None else min(T, self.max_steps)
        return HyperParams(
            n=n,
            d=d,
            m=self.m if m is None else m,
            sigma=self.sigma if sigma is None else sigma,
            C=self.C,
            delta=self.delta,
            eps=self.eps,
            R=self.R,
            eta=self.eta,
            T=T,
            B=self.B,
            b_source=self.b_source,
            eta_source=self.eta_source,
        )

    def to_dict(self) -> dict:
        return asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_list(text: str) -> list:
    text = text.strip()
    if text.startswith("["):
        return json.loads(text)
    return [json.loads(tok) for tok in text.split(",") if tok.strip()]


def parse_field(name: str, text: str):
    """Convert a command-line string to the type of config field ``name``."""
    kind = _FIELD_TYPES[name]
    if "None" in kind and text.strip().lower() in ("none", "null"):
        return None
    try:
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
        if kind.startswith("bool"):
            return _parse_bool(text)
        if kind.startswith("list"):
            return _parse_list(text)
    except (ValueError, json.JSONDecodeError) as err:
        raise ConfigError(f"--{name}: cannot parse {text!r}") from err
    return text


def load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config {path} is not valid JSON: {err}") from err
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    unknown = set(data) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    data.update(overrides)
    try:
        return ExperimentConfig(**data)
    except TypeError as err:
        raise ConfigError(str(err)) from err


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset_file is not None:
        try:
            return read_dataset(cfg.dataset_file, cfg.label_file)
        except OSError as err:
            raise ConfigError(f"cannot read dataset: {err}") from err
    return gen_dataset(cfg.n, cfg.d, cfg.dataset_seed, cfg.dataset_kind)


def thread_count() -> int:
    raw = os.environ.get("EXPREG_THREADS", "1")
    try:
        k = int(raw)
    except ValueError as err:
        raise ConfigError(f"EXPREG_THREADS must be an integer, got {raw!r}") from err
    if k < 1:
        raise ConfigError("EXPREG_THREADS must be >= 1")
    return k


def parallel_map(fn, items) -> list:
    """Ordered map over independent work items, capped by EXPREG_THREADS."""
    items = list(items)
    k = min(thread_count(), len(items))
    if k <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=k) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- output


def prepare_out_dir(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise ConfigError(f"cannot create output directory {out}: {err}") from err
    if not os.access(out, os.W_OK | os.X_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def write_outputs(out: Path, files: dict) -> None:
    """Write every file to a temp name first, then rename them all into place."""
    staged = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(dir=out, prefix=f".{name}.", suffix=".tmp")
            with os.fdopen(fd, "w") as fh:
                fh.write(text)
            staged.append((tmp, out / name))
    except OSError:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, dest in staged:
        os.replace(tmp, dest)


def _dump(doc) -> str:
    return json.dumps(theory._clean(doc), indent=2, sort_keys=True) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if v is None:
        return ""
    return format(float(v), ".17g")


# -------------------------------------------------------------- commands


def _cts_lambda(ds: Dataset, sigma: float) -> float:
    return lambda_min(h_cts_closed(ds, sigma)).lambda_min


def run_summary(trace) -> dict:
    """Summary entries, all recomputable from the trace CSV columns."""
    hp = trace.hp
    eps_hits = [t for t, v in zip(trace.t, trace.loss) if v <= hp.eps]
    return {
        "seed": trace.seed,
        "steps": trace.t[-1],
        "final_loss": trace.loss[-1],
        "initial_loss": trace.loss[0],
        "reached_eps": trace.loss[-1] <= hp.eps,
        "steps_to_eps": eps_hits[0] if eps_hits else None,
        "max_drift": max(trace.max_drift),
        "stop_reason": trace.stop_reason,
        "lambda": hp.lam,
        "B": hp.B,
        "eta": hp.eta,
        "T": hp.T,
        "D": theory.trace_drift_radius(trace),
    }


def _train_seeds(cfg: ExperimentConfig, ds: Dataset, lam: float, m=None, sigma=None, T_default=None):
    hp = cfg.hyperparams(ds.n, ds.d, m, sigma)
    if hp.T is None and T_default is not None:
        hp = replace(hp, T=T_default)
    hp = replace(hp, lam=lam)

    def one(seed):
        return train(
            hp,
            ds,
            init_mode=cfg.init_mode,
            seed=int(seed),
            record_kernel_every=cfg.record_kernel_every,
            early_stop=cfg.early_stop,
            max_seconds=cfg.max_seconds,
            snapshot_every=0,
        )

    return parallel_map(one, cfg.seeds)


def cmd_train(cfg: ExperimentConfig) -> tuple[int, dict]:
    ds = load_dataset(cfg)
    lam = _cts_lambda(ds, cfg.sigma)
    traces = _train_seeds(cfg, ds, lam)
    files = {f"trace_seed{tr.seed}.csv": trace_csv_text(tr) for tr in traces}
    runs = [run_summary(tr) for tr in traces]
    files["summary.json"] = _dump({"config": cfg.to_dict(), "runs": runs, "all_reached_eps": all(r["reached_eps"] for r in runs)})
    return EXIT_OK, files


def _kernel_gaps(Hd, Hc) -> dict:
    diff = Hd - Hc
    return {"fro_gap": fro_norm(diff), "inf_gap": inf_norm(diff), "spectral_gap": spectral_norm(diff)}


def cmd_ntk(cfg: ExperimentConfig) -> tuple[int, dict]:
    ds = load_dataset(cfg)
    Kc = h_cts_closed(ds, cfg.sigma)
    Kmc = h_cts_mc(ds, cfg.sigma, cfg.mc_samples, cfg.dataset_seed)
    files = {"h_cts_closed.csv": kernel_csv_text(Kc), "h_cts_mc.csv": kernel_csv_text(Kmc)}
    z = np.abs(Kmc.H - Kc.H) / np.where(Kmc.stderr > 0, Kmc.stderr, np.inf)
    exact = Kmc.H == Kc.H
    per_seed = []
    for seed in cfg.seeds:
        Kd = h_dis(ds, init_state(cfg.init_mode, ds.d, cfg.m, cfg.sigma, int(seed)))
        files[f"h_dis_seed{seed}.csv"] = kernel_csv_text(Kd)
        per_seed.append({"seed": seed, "lambda_dis": lambda_min(Kd).lambda_min, **_kernel_gaps(Kd.H, Kc.H)})
    sweep = []
    for m in cfg.m_grid:
        gaps = [
            fro_norm(h_dis(ds, init_state(cfg.init_mode, ds.d, int(m), cfg.sigma, int(s))).H - Kc.H) for s in cfg.seeds
        ]
        sweep.append({"m": int(m), "median_fro_gap": float(np.median(gaps))})
    doc = {
        "config": cfg.to_dict(),
        "n": ds.n,
        "sigma": cfg.sigma,
        "lambda_cts": lambda_min(Kc).lambda_min,
        "lambda_mc": lambda_min(Kmc).lambda_min,
        "mc_samples": cfg.mc_samples,
        "mc": {**_kernel_gaps(Kmc.H, Kc.H), "within_3se_fraction": float(np.mean((z <= 3) | exact))},
        "dis": per_seed,
        "m_sweep": sweep,
    }
    files["spectral.json"] = _dump(doc)
    return EXIT_OK, files


def _concentration_at_threshold(ds, cfg, lam, B):
    """Kernel concentration at a width meeting the threshold for its own realized B."""
    m = math.ceil(theory.concentration_threshold(lam, ds.n, B, cfg.delta))
    for _ in range(5):
        if m > M_STAR_CAP:
            break
        checks = theory.check_kernel_concentration(ds, cfg.sigma, [m], cfg.trials, cfg.dataset_seed, lam, cfg.delta)
        m_star = checks[0].detail["m_star"]
        if m >= m_star:
            return checks
        m = math.ceil(1.05 * m_star)
    return [theory.single("kernel_concentration.threshold_width", m, M_STAR_CAP, diagnostic=True)]


def cmd_verify(cfg: ExperimentConfig) -> tuple[int, dict]:
    ds = load_dataset(cfg)
    lam = _cts_lambda(ds, cfg.sigma)
    checks = []
    runs = []
    for tr in _train_seeds(cfg, ds, lam, T_default=VERIFY_DEFAULT_STEPS):
        hp, tag = tr.hp, f"[seed={tr.seed}]"
        group = (
            theory.check_induction(tr)
            + theory.check_claims_c1_c2_c3(tr)
            + [theory.check_contraction(tr)]
            + theory.check_exp_bounds(tr.state0, tr.final_state, ds, hp.B, hp.R)
            + [
                theory.check_h_asy_inf(ds, tr.final_state, hp.B, hp.R, tr.state0),
                theory.check_gradient_norm_bound(tr.final_state, ds, hp.B, hp.R, tr.state0),
                theory.aggregate(
                    "loss_decomposition",
                    [theory.single("", abs(tr.resid[k]), 1e-8 * max(1.0, tr.loss[k])) for k in range(len(tr) - 1)]
                    or [theory.single("", 0.0, 1.0)],
                ),
            ]
        )
        for c in group:
            c.name += tag
        checks += group
        runs.append(run_summary(tr))

    b_theory = HyperParams(n=ds.n, d=ds.d, m=cfg.m, sigma=cfg.sigma, C=cfg.C, delta=cfg.delta, R=cfg.R,
                           b_source="theory").resolved(lam).B
    part1 = []
    for k in range(cfg.trials):
        st = init_standard(ds.d, cfg.m + cfg.m % 2, cfg.sigma, int(derive_rng(cfg.dataset_seed, 7, k).integers(2**31)))
        part1.append(theory.single("", empirical_B(st, ds), b_theory))
    checks.append(theory.aggregate("exp_bounds.part1.theory_B", part1, cfg.delta, B=b_theory))

    checks += theory.check_kernel_concentration(ds, cfg.sigma, cfg.m_grid, cfg.trials, cfg.dataset_seed, lam, cfg.delta)
    checks += _concentration_at_threshold(ds, cfg, lam, runs[0]["B"])
    st0 = init_state(cfg.init_mode, ds.d, cfg.m, cfg.sigma, int(cfg.seeds[0]))
    checks.append(theory.check_perturbation(ds, st0, cfg.R, None, cfg.trials, cfg.dataset_seed, delta=cfg.delta))

    ok = theory.all_pass(checks)
    files = {"verdict.json": theory.verdict_json(checks, config=cfg.to_dict(), lambda_cts=lam, runs=runs)}
    return (EXIT_OK if ok else EXIT_CHECKS_FAILED), files


SWEEP_COLUMNS = ("m", "sigma", "seed", "metric", "value")


def cmd_sweep(cfg: ExperimentConfig) -> tuple[int, dict]:
    if not cfg.m_grid:
        raise ConfigError("sweep needs a non-empty m_grid")
    ds = load_dataset(cfg)
    sigmas = cfg.sigma_grid or [cfg.sigma]
    rows = []
    for sigma in sigmas:
        sigma = float(sigma)
        Kc = h_cts_closed(ds, sigma)
        lam = lambda_min(Kc).lambda_min
        for m in cfg.m_grid:
            m = int(m)
            for tr in _train_seeds(cfg, ds, lam, m=m, sigma=sigma):
                s = run_summary(tr)
                lam_dis = lambda_min(h_dis(ds, tr.state0)).lambda_min
                metrics = {
                    "lambda": s["lambda"],
                    "lambda_dis": lam_dis,
                    "B": s["B"],
                    "eta": s["eta"],
                    "T": s["T"],
                    "steps": s["steps"],
                    "steps_to_eps": s["steps_to_eps"],
                    "final_loss": s["final_loss"],
                    "reached_eps": s["reached_eps"],
                    "max_drift": s["max_drift"],
                    "D": s["D"],
                    "drift_over_D": s["max_drift"] / s["D"],
                    "D_over_R": s["D"] / cfg.R,
                }
                rows += [(m, sigma, tr.seed, k, v) for k, v in metrics.items()]
            conc = theory.check_kernel_concentration(ds, sigma, [m], cfg.trials, cfg.dataset_seed, lam, cfg.delta)
            rows.append((m, sigma, None, "m_star", conc[0].detail["m_star"]))
            rows.append((m, sigma, None, "conc_part1_pass_rate", 1.0 - conc[0].violation_rate))
            rows.append((m, sigma, None, "conc_part2_pass_rate", 1.0 - conc[1].violation_rate))
            rows.append((m, sigma, None, "median_fro_gap", conc[0].detail["median_error"]))
    lines = [",".join(SWEEP_COLUMNS)]
    for m, sigma, seed, metric, value in rows:
        lines.append(f"{m},{_fmt(sigma)},{'' if seed is None else seed},{metric},{_fmt(value)}")
    return EXIT_OK, {"sweep.csv": "\n".join(lines) + "\n"}


COMMANDS = {"train": cmd_train, "ntk": cmd_ntk, "verify": cmd_verify, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="expreg", description="Exponential-activation regression experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    for name in _FIELD_TYPES:
        p.add_argument(f"--{name}", dest=f"field_{name}", default=None, metavar="VALUE")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {
            name: parse_field(name, getattr(args, f"field_{name}"))
            for name in _FIELD_TYPES
            if getattr(args, f"field_{name}") is not None
        }
        cfg = load_config(args.config, overrides)
        thread_count()
        out = prepare_out_dir(args.out)
        status, files = COMMANDS[args.command](cfg)
        write_outputs(out, files)
    except (ConfigError, ParameterDomainError, PreconditionError, StructuralError, OSError) as err:
        print(f"expreg: error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except RangeError as err:
        print(f"expreg: numerical range error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    if status == EXIT_CHECKS_FAILED:
        print("expreg: some checks failed, see verdict.json", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
