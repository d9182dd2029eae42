#!/usr/bin/env python

"""
Configuration and bookkeeping shared by the ssd-lab subcommands: the INI site
defaults, the JSON experiment config and its schema check, sweep-axis
parsing, per-replication seeds, directories and the terminal progress bar.
"""

import configparser
import copy
import json
import os
from typing import Any, Dict, List
import numpy as np

THREADS_ENV_VAR = "SSD_LAB_THREADS"


class ConfigError(RuntimeError):
    pass


"""
UTILITY
"""


# print iterations progress
# from https://stackoverflow.com/questions/3173320/text-progress-bar-in-terminal-with-block-characters
def print_progress_bar(
    iteration,
    total,
    prefix="",
    suffix="",
    decimals=1,
    length=50,
    fill="█",
    printEnd="\r",
):
    """
    Call in a loop to create terminal progress bar
    @params:
        iteration   - Required  : current iteration (Int)
        total       - Required  : total iterations (Int)
        prefix      - Optional  : prefix string (Str)
        suffix      - Optional  : suffix string (Str)
        decimals    - Optional  : positive number of decimals in percent complete (Int)
        length      - Optional  : character length of bar (Int)
        fill        - Optional  : bar fill character (Str)
        printEnd    - Optional  : end character (e.g. "\r", "\r\n") (Str)
    """
    if total <= 0:
        return
    percent = ("{0:." + str(decimals) + "f}").format(100 * (iteration / float(total)))
    filledLength = int(length * iteration // total)
    bar = fill * filledLength + "-" * (length - filledLength)
    print(f"\r{prefix} |{bar}| {percent}% {suffix}", end=printEnd)
    if iteration == total:
        print()


def make_dir_if_not_exists(directory):
    if directory and not os.path.isdir(directory):
        os.makedirs(directory)


def replication_seed(root_seed: int, index: int) -> np.random.SeedSequence:
    """Seed of replication `index`; adding replications never changes earlier ones."""
    return np.random.SeedSequence(entropy=int(root_seed), spawn_key=(int(index),))


def replication_int_seed(root_seed: int, index: int) -> int:
    return int(replication_seed(root_seed, index).generate_state(1, dtype=np.uint64)[0])


"""
SITE DEFAULTS (config.ini)
"""


def load_config(config_file):
    cfg = configparser.ConfigParser()
    try:
        print(f"\nLoading config file at {config_file}...")
        if len(cfg.read(config_file)) == 0:
            raise FileNotFoundError("no such file")
    except Exception as e:
        raise ConfigError(f"ERROR: Could not load config file at {config_file}: {str(e)}")
    return cfg


class SiteDefaults:
    def __init__(self, cfg: configparser.ConfigParser = None):
        """
        Site-wide defaults read from config.ini. Missing sections or keys fall
        back to the built-in values below.
        """
        self.output_dir = "output"
        self.significance = 0.001
        self.tolerance = 1e-12
        self.exact_tolerance = 1e-10
        self.rounds = 100000
        self.backup_kind = "fast_random"
        self.batch_size = 1
        self.r_primary = 1.0
        self.r_backup = 1.0
        self.number_width = 16
        self.threads = 1

        if cfg is not None:
            self.read(cfg)

        if THREADS_ENV_VAR in os.environ:
            try:
                self.threads = int(os.environ[THREADS_ENV_VAR])
            except ValueError:
                raise ConfigError(
                    f"ERROR: {THREADS_ENV_VAR} must be an integer, got {os.environ[THREADS_ENV_VAR]!r}"
                )
        if self.threads < 1:
            raise ConfigError(f"ERROR: thread count must be >= 1, got {self.threads}")

    def read(self, cfg: configparser.ConfigParser):
        try:
            self.output_dir = cfg.get("dir", "output", fallback=self.output_dir)
            self.significance = cfg.getfloat("stats", "significance", fallback=self.significance)
            self.tolerance = cfg.getfloat("stats", "tolerance", fallback=self.tolerance)
            self.exact_tolerance = cfg.getfloat("stats", "exact_tolerance", fallback=self.exact_tolerance)
            self.rounds = cfg.getint("sim", "rounds", fallback=self.rounds)
            self.backup_kind = cfg.get("sim", "backup_kind", fallback=self.backup_kind)
            self.batch_size = cfg.getint("sim", "batch_size", fallback=self.batch_size)
            self.r_primary = cfg.getfloat("cache", "r_primary", fallback=self.r_primary)
            self.r_backup = cfg.getfloat("cache", "r_backup", fallback=self.r_backup)
            self.number_width = cfg.getint("cache", "number_width", fallback=self.number_width)
            self.threads = cfg.getint("parallel", "threads", fallback=self.threads)
        except ValueError as e:
            raise ConfigError(f"ERROR: Bad value in config file: {str(e)}")

    def __str__(self):
        return "\n".join(f"{key}: {val}" for key, val in vars(self).items())


"""
EXPERIMENT CONFIG (JSON)
"""

# every key an experiment config may use, with its default;
# None means "no default" (derived at run time or optional)
EXPERIMENT_DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "replications": 1,
    "output": None,
    "lm": {
        "vocab_size": 16,
        "order": 1,
        "concentration": 0.5,
        "seed": 0,
        "alpha_goal": 0.8,
        "epsilon": None,
        "noise_seed": 1,
        "temperature": 1.0,
        "target_file": None,
        "draft_file": None,
    },
    "sim": {
        "mode": "ssd",
        "K": 3,
        "rounds": None,
        "batch_size": None,
        "backup_kind": None,
        "T_p": 0.5,
        "T_b": 0.0,
        "max_tokens": None,
        "lazy_cache": True,
    },
    "scheme": {
        "kind": "standard",
        "F": 1,
        "C": 1.0,
        "temperature": 1.0,
    },
    "fanout": {
        "shape": "geometric",
        "budget_primary": 8,
        "budget_backup": 8,
        "r_primary": None,
        "r_backup": None,
        "a_primary": None,
        "a_backup": None,
        "primary": None,
        "backup": None,
    },
    "sweep": {
        "budget": None,
        "F": None,
        "C": None,
        "batch": None,
        "temperature": None,
    },
    "lossless": {
        "mode": "montecarlo",
        "tokens": 200000,
        "significance": None,
    },
}

CHOICES = {
    ("sim", "mode"): ("ar", "sd", "ssd"),
    ("sim", "backup_kind"): (None, "same_primary_jit", "fast_random"),
    ("scheme", "kind"): ("standard", "saguaro"),
    ("fanout", "shape"): ("geometric", "uniform", "explicit", "exhaustive"),
    ("lossless", "mode"): ("exact", "montecarlo"),
}

# keys whose value is a sweep axis or explicit plan, not a scalar
LIST_KEYS = {("fanout", "primary"), ("fanout", "backup")} | {("sweep", key) for key in EXPERIMENT_DEFAULTS["sweep"]}


def _check_type(path, default, val):
    name = ".".join(path)
    if path in LIST_KEYS:
        if val is not None and not isinstance(val, (list, dict)):
            raise ConfigError(f"ERROR: config key {name} must be a list or a parameter object, got {val!r}")
        return
    if default is None or val is None:
        return
    if isinstance(default, bool):
        ok = isinstance(val, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(val, (int, float)) and not isinstance(val, bool)
        if isinstance(default, int) and not isinstance(default, bool) and isinstance(val, float):
            ok = ok and float(val).is_integer()
    else:
        ok = isinstance(val, type(default))
    if not ok:
        raise ConfigError(f"ERROR: config key {name} must be of type {type(default).__name__}, got {val!r}")


def _merge(path, defaults: Dict, raw: Dict) -> Dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"ERROR: config section {'.'.join(path) or '<root>'} must be an object")
    unknown = sorted(set(raw) - set(defaults))
    if len(unknown) > 0:
        where = ".".join(path) or "top level"
        raise ConfigError(f"ERROR: unknown config keys at {where}: {unknown}")
    out = {}
    for key, default in defaults.items():
        sub = path + (key,)
        if isinstance(default, dict):
            out[key] = _merge(sub, default, raw.get(key, {}))
            continue
        val = raw.get(key, copy.deepcopy(default))
        _check_type(sub, default, val)
        if sub in CHOICES and val not in CHOICES[sub]:
            raise ConfigError(f"ERROR: config key {'.'.join(sub)} must be one of {CHOICES[sub]}, got {val!r}")
        out[key] = val
    return out


def validate_experiment_config(raw: Dict) -> Dict:
    """
    Check a raw experiment config against the schema and fill in defaults.
    Unknown keys at any level are rejected.
    """
    cfg = _merge((), EXPERIMENT_DEFAULTS, raw)
    if cfg["replications"] < 1:
        raise ConfigError(f"ERROR: replications must be >= 1, got {cfg['replications']}")
    if cfg["seed"] < 0:
        raise ConfigError(f"ERROR: seed must be >= 0, got {cfg['seed']}")
    if cfg["sim"]["K"] < 1:
        raise ConfigError(f"ERROR: sim.K must be >= 1, got {cfg['sim']['K']}")
    for key in ("rounds", "batch_size", "max_tokens"):
        val = cfg["sim"][key]
        if val is not None and val < 1:
            raise ConfigError(f"ERROR: sim.{key} must be >= 1, got {val}")
    return cfg


def load_json_config(config_file: str) -> Dict:
    try:
        print(f"Loading config file at {config_file}...")
        with open(config_file) as cfg:
            return json.load(cfg)
    except Exception as e:
        raise ConfigError(f"ERROR: Could not load config file at {config_file}: {str(e)}")


def load_experiment_config(config_file: str) -> Dict:
    return validate_experiment_config(load_json_config(config_file))


"""
SWEEP AXES
"""


def parse_range_param(minval: float, maxval: float, step: float, verbose=False):
    if verbose:
        print(f"Setting to range from {minval} to {maxval} with step size {step}")
    if maxval <= minval:
        raise ConfigError("ERROR: maxval must be greater than minval.")
    if step <= 0 or step > abs(maxval - minval):
        raise ConfigError(
            "ERROR: step size must be positive and cannot be greater than the difference between minval and maxval."
        )
    return [float(x) for x in np.arange(minval, maxval, step)]


def parse_logrange_param(minval: float, maxval: float, base: float, n: int, to_int=False, verbose=False):
    if verbose:
        print(f'Generating {n}-length {"integer" if to_int else "float"} range using log base {base}')
    if maxval <= minval:
        raise ConfigError("ERROR: maxval must be greater than minval.")
    if minval <= 0:
        raise ConfigError("ERROR: minval must be positive for a log range.")
    minlog = np.log(minval) / np.log(base)
    maxlog = np.log(maxval) / np.log(base)
    res = [float(x) for x in np.logspace(minlog, maxlog, num=n, base=base)]
    if to_int:
        # duplicates from rounding collapse, order kept
        res = list(dict.fromkeys(round(num) for num in res))
    return res


def parse_param(param_name: str, param_info, verbose=False) -> List:
    """
    Parse a sweep axis into the list of values it stands for.

    :param param_name: Name of the axis as in the config file.
    :param param_info: Either a bare list or an object with "type" one of
    list, range, logrange and the matching sub-object.
    """
    if verbose:
        print(f"\nParsing parameter {param_name}:")

    if isinstance(param_info, list):
        res = list(param_info)
    elif not isinstance(param_info, dict) or "type" not in param_info:
        raise ConfigError(f"ERROR: parameter {param_name} must be a list or an object with a 'type' key")
    elif param_info["type"] == "list":
        res = list(param_info["list"])
    elif param_info["type"] == "range":
        info = param_info["range"]
        res = parse_range_param(info["minval"], info["maxval"], info["step"], verbose=verbose)
    elif param_info["type"] == "logrange":
        info = param_info["logrange"]
        res = parse_logrange_param(
            info["minval"], info["maxval"], info.get("base", 10), info["n"],
            to_int=info.get("to_int", False), verbose=verbose,
        )
    else:
        raise ConfigError(
            f"ERROR: Type of parameter {param_name} must be one of the following: list, range, logrange."
        )

    if len(res) == 0:
        raise ConfigError(f"ERROR: parameter {param_name} has an empty grid")
    if verbose:
        print(f"Result: {res}")
    return res
