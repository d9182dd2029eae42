#!/usr/bin/env python

"""
ssd-lab: experiment runner for the speculative and speculative-speculative
decoding simulators.

Subcommands:
- simulate: one row per replication of an AR, SD or SSD run
- sweep_fanout: hit/miss rates and speed over fan-out budgets (uniform vs geometric)
- sweep_c: Saguaro down-weighting constant C against acceptance and hit rate
- sweep_batch: batch size against the two backup strategies
- verify_lossless: exact or Monte-Carlo check that the emitted stream follows the target
- construction1: the four-token worked example where Saguaro drafting doubles the hit rate
- make_lms: write a calibrated target/draft pair to JSON files
- fit_powerlaw: fit miss_rate ~ F^-r to a CSV of (F, miss_rate) rows
- protocol: two-process draft/verifier harness, JSON-lines message transcript and overhead figures

Outputs:
- CSV tables with fixed headers (sweeps, simulate); sweep_batch exits 1 when the
  measured crossover disagrees with the closed-form b*
- JSON-lines transcript (protocol)
- JSON reports (verify_lossless, construction1, fit_powerlaw)
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from typing import Callable, Dict, List
import numpy as np

from cache import (
    FanOutPlan,
    conditional_hit_rate,
    exhaustive_fanout,
    geometric_fanout,
    rejection_hit_rate,
    residual_hit_rate,
    uniform_fanout,
)
from dist import Saguaro, Standard, acceptance_rate, apply_scheme, residual
from experiment import (
    ConfigError,
    SiteDefaults,
    load_config,
    load_experiment_config,
    make_dir_if_not_exists,
    parse_param,
    print_progress_bar,
    replication_int_seed,
    validate_experiment_config,
)
from hitmodel import InsufficientData, fit_powerlaw, load_powerlaw_csv
from lm import LMPair, calibrate_pair, derive_draft, load_lm, make_lm, mean_acceptance, save_lm
from pdtable import makepath4file, pdtableclass
from perf import (
    BackupKind,
    NoCrossover,
    TimingParams,
    TokenYields,
    batch_crossover,
    critical_batch,
    crossover_agrees,
    overhead_estimate,
    simulated_crossover,
    speedup_batch,
    speedup_sd,
    speedup_ssd,
)
from protocol import run_protocol_harness, write_transcript
from sim import SimConfig, run_ar, run_sd, run_ssd, two_sample_lossless_test
from specdec import Origin, exact_lossless_tv

SIMULATE_COLUMNS = [
    "run_id", "mode", "b", "rounds", "tokens", "vtime", "tokens_per_vtime",
    "hit_rate", "hit_rate_p", "hit_rate_b", "mean_accepted", "analytic_speedup", "rel_err",
]
SWEEP_FANOUT_COLUMNS = [
    "run_id", "shape", "budget", "F", "plan_primary", "plan_backup",
    "miss_rate_p", "miss_rate_b", "hit_rate", "model_hit_rate", "tokens_per_vtime",
]
SWEEP_C_COLUMNS = [
    "run_id", "scheme", "C", "F", "acceptance_rate", "hit_rate", "exact_hit_rate", "tokens_per_vtime",
]
SWEEP_BATCH_COLUMNS = [
    "run_id", "b", "backup_kind", "tokens_per_vtime", "speedup", "hit_rate", "analytic",
    "simulated_crossover", "analytic_crossover", "critical_b", "crossover_ok",
]

# clamp for acceptance rates handed to the geometric fan-out
A_CLAMP = 1e-6


class ResultsTable(pdtableclass):
    def __init__(self, columns: List[str], **kwargs):
        pdtableclass.__init__(self, columns=columns, **kwargs)

    def add_row(self, data: Dict):
        self.newrow({key: _csv_value(val) for key, val in data.items()})

    def save(self, filename: str, verbose=False):
        if verbose:
            print(f"Saving table to {filename}...")
        self.write(filename=filename, overwrite=True)
        if verbose:
            print("Success")


def _csv_value(val):
    if val is None:
        return np.nan
    if isinstance(val, FanOutPlan):
        return " ".join(str(int(f)) for f in val.f)
    return val


def write_json_report(report: Dict, filename: str, verbose=False):
    try:
        makepath4file(filename)
        with open(filename, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
    except Exception as e:
        raise RuntimeError(f"ERROR: Could not save report to {filename}: {str(e)}")
    if verbose:
        print(f"Saved report to {filename}")


def run_tasks(fn: Callable, tasks: List, threads: int, verbose=False, prefix="Progress") -> List:
    """Run fn over tasks on a thread pool; results come back in task order."""
    results = []
    with ThreadPoolExecutor(max_workers=threads) as executor:
        for i, res in enumerate(executor.map(fn, tasks)):
            results.append(res)
            if verbose:
                print_progress_bar(i + 1, len(tasks), prefix=prefix)
    return results


"""
CONSTRUCTION 1
"""

CONSTRUCTION1_TARGET = (0.48, 0.48, 0.02, 0.02)
CONSTRUCTION1_DRAFT = (0.49, 0.49, 0.01, 0.01)
CONSTRUCTION1_C = Fraction(47, 147)
CONSTRUCTION1_F = 2


def construction1_report(T_p: float = 0.5, T_b: float = 0.5, tol: float = 1e-12) -> Dict:
    """
    Four-token example: target (.48,.48,.02,.02), draft (.49,.49,.01,.01).
    Down-weighting the two cached tokens by C = 47/147 keeps the acceptance
    rate at 0.98 but moves all residual mass onto the cache, so a rejected
    round always hits.
    """
    # exact rational down-weighting
    q = [Fraction(p).limit_denominator(100) for p in CONSTRUCTION1_DRAFT]
    weights = [w * CONSTRUCTION1_C if i < CONSTRUCTION1_F else w for i, w in enumerate(q)]
    total = sum(weights)
    exact = [w / total for w in weights]

    z = np.log(np.array(CONSTRUCTION1_DRAFT))
    p_t = np.array(CONSTRUCTION1_TARGET)
    standard = Standard()
    saguaro = Saguaro(CONSTRUCTION1_F, float(CONSTRUCTION1_C))
    p_d = apply_scheme(z, standard).probs
    p_s = apply_scheme(z, saguaro).probs

    alpha_d = acceptance_rate(p_t, p_d)
    alpha_s = acceptance_rate(p_t, p_s)
    r_d = residual(p_t, p_d).probs
    r_s = residual(p_t, p_s).probs
    hit_d = rejection_hit_rate(p_t, z, standard, CONSTRUCTION1_F)
    hit_s = rejection_hit_rate(p_t, z, saguaro, CONSTRUCTION1_F)

    # matched yields and timings; only the hit rate differs
    E = 1.0 + alpha_d
    timing = TimingParams(T_p, T_b)
    speed_d = speedup_ssd(hit_d, TokenYields(E, E), timing)
    speed_s = speedup_ssd(hit_s, TokenYields(E, E), timing)

    checks = {
        "saguaro_draft": float(np.max(np.abs(p_s - np.array([float(x) for x in exact])))),
        "acceptance_standard": abs(alpha_d - 0.98),
        "acceptance_saguaro": abs(alpha_s - 0.98),
        "residual_standard": float(np.max(np.abs(r_d - np.array([0, 0, 0.5, 0.5])))),
        "residual_saguaro": float(np.max(np.abs(r_s - np.array([0.5, 0.5, 0, 0])))),
        "hit_rate_standard": abs(hit_d - 0.5),
        "hit_rate_saguaro": abs(hit_s - 1.0),
    }
    exact_ok = exact == [Fraction(47, 100), Fraction(47, 100), Fraction(3, 100), Fraction(3, 100)]
    passed = exact_ok and all(err <= tol for err in checks.values()) and speed_s > speed_d
    return {
        "target": list(CONSTRUCTION1_TARGET),
        "draft": list(CONSTRUCTION1_DRAFT),
        "C": str(CONSTRUCTION1_C),
        "F": CONSTRUCTION1_F,
        "saguaro_draft_exact": [str(x) for x in exact],
        "saguaro_draft": p_s.tolist(),
        "acceptance_standard": alpha_d,
        "acceptance_saguaro": alpha_s,
        "residual_standard": r_d.tolist(),
        "residual_saguaro": r_s.tolist(),
        "hit_rate_standard": hit_d,
        "hit_rate_saguaro": hit_s,
        "T_p": T_p,
        "T_b": T_b,
        "E": E,
        "speedup_standard": speed_d,
        "speedup_saguaro": speed_s,
        "max_error": max(checks.values()),
        "pass": bool(passed),
    }


"""
EXPERIMENT LOOP
"""


class SsdLabLoop:
    def __init__(self, cfg: Dict, site: SiteDefaults, threads: int = None, verbose=True):
        """
        :param cfg: Validated experiment config (see experiment.EXPERIMENT_DEFAULTS).
        :param site: Site defaults from config.ini.
        :param threads: Worker threads for replications and grid points.
        """
        self.cfg = cfg
        self.site = site
        self.threads = site.threads if threads is None else threads
        self.verbose = verbose
        if self.threads < 1:
            raise ConfigError(f"ERROR: thread count must be >= 1, got {self.threads}")

        sim = cfg["sim"]
        self.K = sim["K"]
        self.rounds = sim["rounds"] if sim["rounds"] is not None else site.rounds
        self.batch_size = sim["batch_size"] if sim["batch_size"] is not None else site.batch_size
        try:
            self.backup_kind = BackupKind(sim["backup_kind"] if sim["backup_kind"] is not None else site.backup_kind)
        except ValueError as e:
            raise ConfigError(f"ERROR: unknown backup kind: {str(e)}")
        self.timing = TimingParams(sim["T_p"], sim["T_b"])
        self.crossover_failures: List[int] = []
        self.pair = self.build_pair()
        self.scheme = self.build_scheme()

    def _print(self, msg):
        if self.verbose:
            print(msg)

    def build_pair(self) -> LMPair:
        lm_cfg = self.cfg["lm"]
        if lm_cfg["target_file"] is not None:
            target = load_lm(lm_cfg["target_file"])
            if lm_cfg["draft_file"] is not None:
                draft = load_lm(lm_cfg["draft_file"])
                pair = LMPair(target, draft, mean_acceptance(target, draft))
            else:
                pair = self._derive(target)
        else:
            target = make_lm(lm_cfg["vocab_size"], lm_cfg["order"], lm_cfg["concentration"], lm_cfg["seed"])
            pair = self._derive(target)

        if lm_cfg["temperature"] != 1.0:
            pair = LMPair(pair.target.with_temperature(lm_cfg["temperature"]),
                          pair.draft.with_temperature(lm_cfg["temperature"]),
                          pair.nominal_alpha, epsilon=pair.epsilon)
        self._print(f"Language models: V={pair.target.V}, m={pair.target.m}, {pair}")
        return pair

    def _derive(self, target) -> LMPair:
        lm_cfg = self.cfg["lm"]
        if lm_cfg["epsilon"] is not None:
            draft = derive_draft(target, lm_cfg["epsilon"], lm_cfg["noise_seed"])
            return LMPair(target, draft, mean_acceptance(target, draft), epsilon=lm_cfg["epsilon"])
        return calibrate_pair(target, lm_cfg["alpha_goal"], lm_cfg["noise_seed"], verbose=self.verbose)

    def build_scheme(self, C: float = None):
        sc = self.cfg["scheme"]
        temperature = sc["temperature"]
        if self.cfg["lm"]["temperature"] != 1.0 and temperature == 1.0:
            temperature = self.cfg["lm"]["temperature"]
        if sc["kind"] == "standard" and C is None:
            return Standard(temperature)
        return Saguaro(sc["F"], sc["C"] if C is None else C, temperature)

    def role_acceptance(self, role: Origin, backup_kind: BackupKind, scheme) -> float:
        """Mean acceptance rate of speculations from the given role, for the geometric plan."""
        target, draft = self.pair.target, self.pair.draft
        if role == Origin.BACKUP and backup_kind == BackupKind.FAST_RANDOM:
            a = float(np.minimum(target.probs_table(), 1.0 / target.V).sum(axis=1).mean())
        else:
            a = mean_acceptance(target, draft, scheme)
        return min(max(a, A_CLAMP), 1.0 - A_CLAMP)

    def build_plan(self, role: Origin, shape: str = None, budget: int = None,
                   backup_kind: BackupKind = None, scheme=None) -> FanOutPlan:
        fo = self.cfg["fanout"]
        key = "primary" if role == Origin.PRIMARY else "backup"
        shape = fo["shape"] if shape is None else shape
        budget = fo[f"budget_{key}"] if budget is None else budget
        backup_kind = self.backup_kind if backup_kind is None else backup_kind
        V = self.pair.target.V

        if shape == "explicit":
            if fo[key] is None:
                raise ConfigError(f"ERROR: fanout.shape is explicit but fanout.{key} is not set")
            plan = FanOutPlan(fo[key], role=role)
        elif shape == "exhaustive":
            plan = exhaustive_fanout(self.K, V, role=role)
        elif shape == "uniform":
            plan = uniform_fanout(self.K, int(budget), role=role, V=V)
        elif shape == "geometric":
            r = fo[f"r_{key}"]
            if r is None:
                r = self.site.r_primary if role == Origin.PRIMARY else self.site.r_backup
            a = fo[f"a_{key}"]
            if a is None:
                a = self.role_acceptance(role, backup_kind, self.scheme if scheme is None else scheme)
            plan = geometric_fanout(a, r, self.K, int(budget), role=role, V=V)
        else:
            raise ConfigError(f"ERROR: unknown fan-out shape {shape}")
        if plan.K != self.K:
            raise ConfigError(f"ERROR: fanout.{key} has {plan.K + 1} entries, expected K+1={self.K + 1}")
        return plan

    def sim_config(self, seed: int, **overrides) -> SimConfig:
        backup_kind = overrides.pop("backup_kind", self.backup_kind)
        scheme = overrides.pop("scheme", self.scheme)
        plan_primary = overrides.pop("plan_primary", None)
        plan_backup = overrides.pop("plan_backup", None)
        if plan_primary is None:
            plan_primary = self.build_plan(Origin.PRIMARY, backup_kind=backup_kind, scheme=scheme)
        if plan_backup is None:
            plan_backup = self.build_plan(Origin.BACKUP, backup_kind=backup_kind, scheme=scheme)
        args = dict(
            pair=self.pair,
            K=self.K,
            scheme=scheme,
            plan_primary=plan_primary,
            plan_backup=plan_backup,
            timing=self.timing,
            backup_kind=backup_kind,
            batch_size=self.batch_size,
            rounds=self.rounds,
            seed=seed,
            max_tokens=self.cfg["sim"]["max_tokens"],
            lazy_cache=self.cfg["sim"]["lazy_cache"],
        )
        args.update(overrides)
        return SimConfig(**args)

    def seeds(self) -> List[int]:
        return [replication_int_seed(self.cfg["seed"], i) for i in range(self.cfg["replications"])]

    def axis(self, name: str) -> List:
        info = self.cfg["sweep"][name]
        if info is None:
            raise ConfigError(f"ERROR: this subcommand needs the sweep.{name} axis in the config")
        return parse_param(name, info, verbose=self.verbose)

    def _warm_tables(self, schemes):
        # fill the memoized tables before worker threads share the models
        self.pair.target.probs_table()
        self.pair.target.ranking()
        self.pair.draft.ranking()
        for scheme in schemes:
            self.pair.draft.scheme_table(scheme)

    # simulate

    def simulate_one(self, task) -> Dict:
        run_id, seed = task
        mode = self.cfg["sim"]["mode"]
        if mode == "ar":
            stats = run_ar(self.pair.target, [0] * self.pair.target.m, self.rounds, seed=seed,
                           batch_size=self.batch_size)
            analytic = 1.0
        elif mode == "sd":
            stats = run_sd(self.sim_config(seed))
            analytic = speedup_sd(stats.mean_emitted, self.timing.T_p)
        else:
            cfg = self.sim_config(seed)
            stats = run_ssd(cfg)
            if stats.hit_rate is None:
                analytic = None
            else:
                analytic = speedup_batch(stats.hit_rate, stats.yields(),
                                         TimingParams(self.timing.T_p, cfg.backup_time), cfg.batch_size)
        row = stats.summary()
        row["run_id"] = run_id
        row["analytic_speedup"] = analytic
        row["rel_err"] = None if analytic is None else abs(stats.speedup - analytic) / analytic
        return row

    def simulate(self) -> ResultsTable:
        self._warm_tables([self.scheme])
        tasks = list(enumerate(self.seeds()))
        table = ResultsTable(SIMULATE_COLUMNS)
        for row in run_tasks(self.simulate_one, tasks, self.threads, self.verbose, prefix="Replications"):
            table.add_row(row)
        return table

    # sweep_fanout

    def sweep_fanout_one(self, task) -> Dict:
        run_id, seed, shape, budget, F = task
        if shape == "flat":
            plan_p = FanOutPlan([F] * (self.K + 1), role=Origin.PRIMARY)
            plan_b = FanOutPlan([F] * (self.K + 1), role=Origin.BACKUP)
        else:
            plan_p = self.build_plan(Origin.PRIMARY, shape=shape, budget=budget)
            plan_b = self.build_plan(Origin.BACKUP, shape=shape, budget=budget)
        stats = run_ssd(self.sim_config(seed, plan_primary=plan_p, plan_backup=plan_b))
        r_p = self.cfg["fanout"]["r_primary"] or self.site.r_primary
        a_p = self.role_acceptance(Origin.PRIMARY, self.backup_kind, self.scheme)
        return {
            "run_id": run_id,
            "shape": shape,
            "budget": int(plan_p.f.sum()),
            "F": F,
            "plan_primary": plan_p,
            "plan_backup": plan_b,
            "miss_rate_p": None if stats.hit_rate_p is None else 1.0 - stats.hit_rate_p,
            "miss_rate_b": None if stats.hit_rate_b is None else 1.0 - stats.hit_rate_b,
            "hit_rate": stats.hit_rate,
            "model_hit_rate": conditional_hit_rate(plan_p, a_p, r_p),
            "tokens_per_vtime": stats.tokens_per_vtime,
        }

    def sweep_fanout(self) -> ResultsTable:
        self._warm_tables([self.scheme])
        tasks = []
        has_budget = self.cfg["sweep"]["budget"] is not None
        has_F = self.cfg["sweep"]["F"] is not None
        if not has_budget and not has_F:
            raise ConfigError("ERROR: sweep_fanout needs sweep.budget and/or sweep.F in the config")
        for run_id, seed in enumerate(self.seeds()):
            if has_budget:
                for budget in self.axis("budget"):
                    for shape in ("uniform", "geometric"):
                        tasks.append((run_id, seed, shape, int(budget), None))
            if has_F:
                for F in self.axis("F"):
                    tasks.append((run_id, seed, "flat", None, int(F)))

        table = ResultsTable(SWEEP_FANOUT_COLUMNS)
        for row in run_tasks(self.sweep_fanout_one, tasks, self.threads, self.verbose, prefix="Grid"):
            table.add_row(row)
        self.report_powerlaw(table)
        return table

    def report_powerlaw(self, table: ResultsTable):
        ix = table.ix_not_null("miss_rate_p")
        ix = table.ix_inrange("miss_rate_p", lowlim=0.0, exclude_lowlim=True, indices=ix)
        flat = table.ix_equal("shape", "flat", indices=ix)
        if len(flat) > 0:
            x_col, rows = "F", flat
        else:
            x_col, rows = "budget", table.ix_equal("shape", "uniform", indices=ix)
        samples = list(zip(table.t.loc[rows, x_col], table.t.loc[rows, "miss_rate_p"]))
        try:
            fit = fit_powerlaw(samples)
            self._print(f"Power-law fit of primary miss rate against {x_col}: r = {fit.r:.4f}, R^2 = {fit.r_squared:.4f}")
        except InsufficientData as e:
            self._print(f"Skipping power-law fit: {str(e)}")

    # sweep_c

    def sweep_c_one(self, task) -> Dict:
        run_id, seed, C = task
        scheme = self.build_scheme() if C is None else self.build_scheme(C=C)
        if C is None:
            scheme = Standard(scheme.temperature)
        F = self.cfg["scheme"]["F"]
        target, draft = self.pair.target, self.pair.draft
        exact_hit = float(np.mean([
            residual_hit_rate(target.probs_table()[c], draft.logits[c], F, 1.0 if C is None else C, scheme.temperature)
            for c in range(target.n_contexts)
        ]))
        stats = run_ssd(self.sim_config(seed, scheme=scheme))
        return {
            "run_id": run_id,
            "scheme": "standard" if C is None else "saguaro",
            "C": 1.0 if C is None else C,
            "F": F,
            "acceptance_rate": mean_acceptance(target, draft, scheme),
            "hit_rate": stats.hit_rate,
            "exact_hit_rate": exact_hit,
            "tokens_per_vtime": stats.tokens_per_vtime,
        }

    def sweep_c(self) -> ResultsTable:
        grid = [float(C) for C in self.axis("C")]
        for C in grid:
            if not 0.0 <= C <= 1.0:
                raise ConfigError(f"ERROR: sweep.C values must be in [0, 1], got {C}")
        schemes = [Standard(self.build_scheme().temperature)] + [self.build_scheme(C=C) for C in grid]
        self._warm_tables(schemes)
        tasks = []
        for run_id, seed in enumerate(self.seeds()):
            tasks.append((run_id, seed, None))
            tasks.extend((run_id, seed, C) for C in grid)
        table = ResultsTable(SWEEP_C_COLUMNS)
        for row in run_tasks(self.sweep_c_one, tasks, self.threads, self.verbose, prefix="Grid"):
            table.add_row(row)
        return table

    # sweep_batch

    def sweep_batch_one(self, task) -> Dict:
        run_id, seed, b, backup_kind = task
        cfg = self.sim_config(seed, batch_size=int(b), backup_kind=backup_kind)
        stats = run_ssd(cfg)
        analytic = None
        if stats.hit_rate is not None:
            analytic = speedup_batch(stats.hit_rate, stats.yields(), TimingParams(self.timing.T_p, cfg.backup_time), int(b))
        return {
            "run_id": run_id,
            "b": int(b),
            "backup_kind": backup_kind.value,
            "tokens_per_vtime": stats.tokens_per_vtime,
            "speedup": stats.speedup,
            "hit_rate": stats.hit_rate,
            "analytic": analytic,
            "_stats": stats,
            "_backup_time": cfg.backup_time,
        }

    def sweep_batch(self) -> ResultsTable:
        self._warm_tables([self.scheme])
        grid = [int(b) for b in self.axis("batch")]
        if any(b < 1 for b in grid):
            raise ConfigError(f"ERROR: sweep.batch values must be >= 1, got {grid}")
        tasks = []
        for run_id, seed in enumerate(self.seeds()):
            for b in grid:
                for kind in (BackupKind.SAME_PRIMARY_JIT, BackupKind.FAST_RANDOM):
                    tasks.append((run_id, seed, b, kind))
        rows = run_tasks(self.sweep_batch_one, tasks, self.threads, self.verbose, prefix="Grid")

        crossovers = self.report_crossover(rows)
        table = ResultsTable(SWEEP_BATCH_COLUMNS)
        for row in rows:
            data = {key: val for key, val in row.items() if not key.startswith("_")}
            data.update(crossovers[row["run_id"]])
            table.add_row(data)
        return table

    def report_crossover(self, rows: List[Dict]) -> Dict[int, Dict]:
        """
        Per replication: the measured crossover batch size, the one implied by
        the two measured speedup_batch curves, and the closed-form b*. Sets
        self.crossover_failures to the replications whose measured crossover
        is not the first grid point within one of b*.
        """
        by_key = {(row["run_id"], row["b"], row["backup_kind"]): row for row in rows}
        crossovers = {}
        self.crossover_failures = []
        for run_id in sorted({row["run_id"] for row in rows}):
            bs = sorted({row["b"] for row in rows if row["run_id"] == run_id})
            slow = [by_key[(run_id, b, BackupKind.SAME_PRIMARY_JIT.value)] for b in bs]
            fast = [by_key[(run_id, b, BackupKind.FAST_RANDOM.value)] for b in bs]
            simulated = simulated_crossover(bs, [s["speedup"] for s in slow], [f["speedup"] for f in fast])
            s1, f1 = slow[0]["_stats"], fast[0]["_stats"]
            try:
                analytic = batch_crossover(
                    s1.hit_rate, s1.yields(), TimingParams(self.timing.T_p, slow[0]["_backup_time"]),
                    f1.hit_rate, f1.yields(), TimingParams(self.timing.T_p, fast[0]["_backup_time"]),
                )
            except (NoCrossover, TypeError, RuntimeError):
                analytic = None
            try:
                # closed form assumes the slow backup yields E_hit per miss
                closed = critical_batch(f1.hit_rate, f1.yields(), TimingParams(self.timing.T_p))
            except (NoCrossover, TypeError, RuntimeError):
                closed = None
            # unchecked when the closed form has no crossover
            ok = None if closed is None else crossover_agrees(bs, simulated, closed)
            if ok is False:
                self.crossover_failures.append(run_id)
            crossovers[run_id] = {
                "simulated_crossover": simulated,
                "analytic_crossover": analytic,
                "critical_b": closed,
                "crossover_ok": ok,
            }
            self._print(f"Replication {run_id}: simulated crossover batch {simulated}, "
                        f"analytic crossover {analytic}, closed-form b* {closed}, agrees: {ok}")
        return crossovers

    # verify_lossless

    def verify_lossless(self) -> Dict:
        ll = self.cfg["lossless"]
        significance = ll["significance"] if ll["significance"] is not None else self.site.significance
        target, draft = self.pair.target, self.pair.draft
        if ll["mode"] == "exact":
            tv = 0.0
            for ctx in target.contexts():
                tv = max(tv, exact_lossless_tv(target, draft, list(ctx), self.K, self.scheme))
            return {
                "mode": "exact",
                "tv_distance": tv,
                "chi2_pvalue": None,
                "pass": bool(tv < self.site.exact_tolerance),
            }

        tokens = int(ll["tokens"])
        seed = self.cfg["seed"]
        ar_seed, spec_seed = replication_int_seed(seed, 0), replication_int_seed(seed, 1)
        ar = run_ar(target, [0] * target.m, tokens, seed=ar_seed, verbose=self.verbose)
        cfg = self.sim_config(spec_seed, batch_size=1, rounds=tokens, max_tokens=tokens)
        if self.cfg["sim"]["mode"] == "sd":
            spec = run_sd(cfg, verbose=self.verbose)
        else:
            spec = run_ssd(cfg, verbose=self.verbose)
        streams = [s[:tokens] for s in spec.streams]
        test = two_sample_lossless_test(ar.streams, streams, target, significance=significance)
        return {
            "mode": "montecarlo",
            "sim_mode": self.cfg["sim"]["mode"],
            "tokens": tokens,
            "tv_distance": test.tv_distance,
            "chi2_statistic": test.statistic,
            "chi2_dof": test.dof,
            "chi2_pvalue": test.p_value,
            "significance": significance,
            "pass": bool(test.passed),
        }

    # protocol

    def protocol(self, out: str, c_hat: float = None) -> Dict:
        """
        Run the first replication through the two-process harness, write the
        JSON-lines transcript to out and return run and overhead figures.
        c_hat is the draft/target FLOP ratio (default T_p / K).
        """
        cfg = self.sim_config(self.seeds()[0])
        transcript, stats = run_protocol_harness(cfg, lazy=cfg.lazy_cache, verbose=self.verbose)
        write_transcript(transcript, out, verbose=self.verbose)

        if c_hat is None:
            c_hat = self.timing.T_p / self.K
        F = int(max(cfg.plan_primary.f.max(), cfg.plan_backup.f.max()))
        est = overhead_estimate(cfg.batch_size, self.K, F, self.pair.target.V, c_hat, width=self.site.number_width)
        report = {
            "transcript": out,
            "messages": len(transcript),
            "rounds": stats.rounds,
            "tokens": stats.tokens_emitted,
            "vtime": stats.virtual_time,
            "tokens_per_vtime": stats.tokens_per_vtime,
            "hit_rate": stats.hit_rate,
            "F": F,
            "c_hat": c_hat,
        }
        report.update(est._asdict())
        self._print(f"Protocol run: {report['messages']} messages, {stats.tokens_emitted} tokens in "
                    f"{stats.virtual_time:.4g} vtime, hit rate {stats.hit_rate}")
        self._print(f"Overhead per round: {est.draft_tokens_per_round} draft tokens, "
                    f"{est.flop_multiplier_vs_sd:.4g}x SD draft FLOPs, {est.cache_bits} cache bits")
        return report

    # make_lms

    def make_lms(self, out_dir: str) -> Dict:
        make_dir_if_not_exists(out_dir)
        target_file = os.path.join(out_dir, "target.json")
        draft_file = os.path.join(out_dir, "draft.json")
        save_lm(self.pair.target, target_file)
        save_lm(self.pair.draft, draft_file)
        self._print(f"Saved target to {target_file} and draft to {draft_file}")
        return {
            "target_file": target_file,
            "draft_file": draft_file,
            "nominal_alpha": self.pair.nominal_alpha,
            "epsilon": self.pair.epsilon,
        }


"""
COMMAND LINE
"""

SUBCOMMANDS = [
    "simulate", "sweep_fanout", "sweep_c", "sweep_batch",
    "verify_lossless", "construction1", "make_lms", "fit_powerlaw", "protocol",
]


def define_args(parser=None, usage=None, conflict_handler="resolve"):
    if parser is None:
        parser = argparse.ArgumentParser(usage=usage, conflict_handler=conflict_handler)
    parser.add_argument("subcommand", choices=SUBCOMMANDS, help="what to run")
    parser.add_argument(
        "--config",
        default=None,
        type=str,
        help="file name of JSON file with the experiment config",
    )
    parser.add_argument(
        "--config_file",
        default=None,
        type=str,
        help="file name of .ini file with site defaults (default: config.ini next to this script, if present)",
    )
    parser.add_argument("--seed", default=None, type=int, help="root seed, overrides the config seed")
    parser.add_argument("--out", default=None, type=str, help="output file (directory for make_lms)")
    parser.add_argument(
        "--threads",
        default=None,
        type=int,
        help="worker threads for replications (overrides SSD_LAB_THREADS and config.ini)",
    )
    parser.add_argument("--csv", default=None, type=str, help="CSV of F,miss_rate rows for fit_powerlaw")
    parser.add_argument(
        "--c_hat",
        default=None,
        type=float,
        help="draft/target FLOP ratio for the protocol overhead figures (default: T_p / K)",
    )
    parser.add_argument("-q", "--quiet", default=False, action="store_true", help="no progress output")
    return parser


def load_site_defaults(config_file: str = None) -> SiteDefaults:
    if config_file is None:
        default = os.path.join(os.path.dirname(os.path.abspath(__file__)), "config.ini")
        return SiteDefaults(load_config(default)) if os.path.isfile(default) else SiteDefaults()
    return SiteDefaults(load_config(config_file))


def output_filename(args, cfg: Dict, site: SiteDefaults, ext: str) -> str:
    if args.out is not None:
        return args.out
    if cfg["output"] is not None:
        return cfg["output"]
    return os.path.join(site.output_dir, f"{args.subcommand}.{ext}")


def main(argv=None) -> int:
    args = define_args().parse_args(argv)
    verbose = not args.quiet
    try:
        site = load_site_defaults(args.config_file)

        if args.subcommand == "construction1":
            report = construction1_report(tol=site.tolerance)
            write_json_report(report, args.out or os.path.join(site.output_dir, "construction1.json"), verbose=verbose)
            return 0 if report["pass"] else 1

        if args.subcommand == "fit_powerlaw":
            if args.csv is None:
                raise ConfigError("ERROR: fit_powerlaw needs --csv PATH")
            fit = fit_powerlaw(load_powerlaw_csv(args.csv))
            print(f"r = {fit.r:.6f}, R^2 = {fit.r_squared:.6f}")
            if args.out is not None:
                write_json_report(fit._asdict(), args.out, verbose=verbose)
            return 0

        cfg = load_experiment_config(args.config) if args.config is not None else validate_experiment_config({})
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError(f"ERROR: seed must be >= 0, got {args.seed}")
            cfg["seed"] = args.seed
        loop = SsdLabLoop(cfg, site, threads=args.threads, verbose=verbose)

        if args.subcommand == "make_lms":
            loop.make_lms(args.out or cfg["output"] or site.output_dir)
            return 0

        if args.subcommand == "verify_lossless":
            report = loop.verify_lossless()
            write_json_report(report, output_filename(args, cfg, site, "json"), verbose=verbose)
            if verbose:
                print(f"Lossless check ({report['mode']}): tv_distance={report['tv_distance']:.3g}, pass={report['pass']}")
            return 0 if report["pass"] else 1

        if args.subcommand == "protocol":
            report = loop.protocol(output_filename(args, cfg, site, "jsonl"), c_hat=args.c_hat)
            if verbose:
                print(f"Transcript with {report['messages']} messages saved to {report['transcript']}")
            return 0

        table = getattr(loop, args.subcommand)()
        table.save(output_filename(args, cfg, site, "csv"), verbose=verbose)
        if len(loop.crossover_failures) > 0:
            print(f"ERROR: measured crossover batch size disagrees with b* for replications {loop.crossover_failures}",
                  file=sys.stderr)
            return 1
        return 0
    except RuntimeError as e:
        print(str(e), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
