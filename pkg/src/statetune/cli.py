"""``statetune`` command line: data generation, tuning, test-time runs, checks.

Configuration for each command resolves as defaults <- ``--config`` JSON file
<- flags, and the source of every value lands in the run manifest.  The only
environment input is ``STATETUNE_OUT``, which replaces the default output
directory.

Exit codes: 0 ok, 1 replay mismatch, 2 usage or input error, 3 divergence,
4 teacher error, 5 gradient check failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, _backend
from .checkpoint import load_checkpoint, save_checkpoint, verify_fixed_tensors, weights_meta
from .checkpoint import restore_weights
from .core import DEFAULT_NORM_CEILING, FrozenWeights, ModelDims
from .decorrelation import DecorrelationMatrix
from .errors import (ConfigurationError, DivergenceError, FormatError, InputError,
                     StateTuneError, TeacherError)
from .kernel import KernelConfig, KernelLift, SupportSet
from .tasks import TaskSpec, generate, load_dataset, save_dataset
from .testtime import (RemoteTeacher, ScriptedTeacher, TestTimeConfig, guided_generate,
                       scripted_teacher)
from .tuning import REGIMES, StateModel, TuneConfig, tune, write_report

log = logging.getLogger("statetune")

EXIT_OK, EXIT_MISMATCH, EXIT_USAGE, EXIT_DIVERGED, EXIT_TEACHER, EXIT_GRADCHECK = 0, 1, 2, 3, 4, 5
DEFAULT_OUT = "statetune-out"
MANIFEST = "manifest.json"


class UsageError(StateTuneError):
    pass


def _int_list(text):
    if isinstance(text, list):
        return [int(t) for t in text]
    text = str(text).strip()
    return [int(t) for t in text.split(",")] if text else []


def _opt_float(text):
    if text is None or text == "none":
        return None
    return float(text)


def _bool(text):
    if isinstance(text, bool):
        return text
    if str(text).lower() in ("1", "true", "yes"):
        return True
    if str(text).lower() in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Option:
    name: str
    default: object
    type: object
    help: str = ""
    choices: tuple | None = None
    required: bool = False
    hidden: bool = False

    @property
    def flag(self):
        return "--" + self.name.replace("_", "-")


MODEL_OPTIONS = [
    Option("embed_dim", 32, int, "model width C (split across heads)"),
    Option("heads", 4, int, "number of heads H"),
    Option("weight_seed", 0, int, "seed of the frozen weights"),
    Option("decay_bias", 4.0, float, "bias added to the decay pre-activation"),
]

KERNEL_OPTIONS = [
    Option("M", 32, int, "lifted state dimension"),
    Option("gamma", None, _opt_float, "kernel bandwidth (default 1/(2N))"),
    Option("support_selection", "random-gaussian", str, "support vector selection",
           choices=("random-gaussian", "data-centroids")),
    Option("kernel_seed", 0, int, "seed of supports and Q"),
]

SCHEMAS = {
    "gen-data": [
        Option("task", None, str, "task kind", choices=("recall", "copy", "modular-add"),
               required=True),
        Option("vocab", 32, int, "vocabulary size"),
        Option("pairs", 4, int, "key/value pairs (recall)"),
        Option("span", 4, int, "span length (copy)"),
        Option("modulus", 11, int, "modulus (modular-add)"),
        Option("n_train", 2000, int, "training sequences"),
        Option("n_val", 200, int, "validation sequences"),
        Option("n_test", 200, int, "test sequences"),
        Option("seed", 0, int, "generation seed"),
    ],
    "tune": [
        Option("data", None, str, "dataset file written by gen-data", required=True),
        Option("regime", "standard", str, "tuning regime", choices=REGIMES),
        Option("epochs", 5, int, "maximum epochs"),
        Option("lr", None, _opt_float, "state learning rate (default per regime)"),
        Option("lr_R", 1e-4, float, "decorrelation learning rate (dbp)"),
        Option("kappa", 0.5, float, "correlation/variance mix (dbp)"),
        Option("lam", 0.1, float, "decorrelation loss weight (dbp)"),
        Option("batch_size", 1, int, "sequences per step (-1 = full batch)"),
        Option("patience", 3, int, "early-stopping patience in epochs"),
        Option("subsample_frac", 0.1, float, "fraction of the batch used by the R update"),
        Option("ceiling", DEFAULT_NORM_CEILING, float, "state norm ceiling"),
        Option("seed", 0, int, "shuffling and subsample seed"),
        *MODEL_OPTIONS,
        *KERNEL_OPTIONS,
    ],
    "testtime": [
        Option("checkpoint", None, str, "checkpoint from tune (default: zero state)"),
        Option("teacher", "scripted", str, "teacher kind", choices=("scripted", "remote")),
        Option("mode", "distill", str, "objective", choices=("distill", "reinforce")),
        Option("iterations", 5, int, "inner ascent steps per token"),
        Option("eta", 0.01, float, "inner step size"),
        Option("tau", 1.0, float, "sampling temperature"),
        Option("greedy", False, _bool, "greedy decoding"),
        Option("terminal_bonus", 1.0, float, "exact-match bonus (reinforce)"),
        Option("max_len", 32, int, "maximum generated tokens"),
        Option("seed", 0, int, "sampling seed"),
        Option("data", None, str, "dataset supplying prompt and continuation"),
        Option("example", 0, int, "test-split example index (with --data)"),
        Option("prompt", [4, 5, 6], _int_list, "comma-separated prompt tokens"),
        Option("continuation", [7, 8, 9, 10, 11], _int_list,
               "comma-separated scripted continuation"),
        Option("confidence", None, _opt_float, "scripted teacher logit (default one-hot)"),
        Option("teacher_url", None, str, "remote teacher endpoint"),
        Option("timeout_ms", 5000.0, float, "remote teacher timeout"),
        Option("retries", 3, int, "remote teacher attempts"),
        Option("backoff_ms", 250.0, float, "remote retry base backoff"),
        Option("vocab", 32, int, "vocabulary size (without --checkpoint)"),
        *MODEL_OPTIONS,
    ],
    "gradcheck": [
        Option("N", 6, int, "head dimension"),
        Option("T", 10, int, "rollout length"),
        Option("M", 12, int, "lifted dimension"),
        Option("gamma", 0.5, float, "kernel bandwidth of the lifted case"),
        Option("tol", 1e-5, float, "maximum relative error"),
        Option("step", 1e-5, float, "central difference step"),
        Option("heads", 2, int, "number of heads"),
        Option("vocab", 16, int, "vocabulary size"),
        Option("seed", 0, int, "problem seed"),
        Option("inject_fault", False, _bool, hidden=True),
    ],
    "bench": [
        Option("Ns", [8, 16, 32], _int_list, "base state sizes"),
        Option("Ms", [32, 64, 128], _int_list, "lifted state sizes"),
        Option("iters", 200, int, "timed iterations per op"),
        Option("seed", 0, int, "input seed"),
    ],
}


def build_parser():
    parser = argparse.ArgumentParser(prog="statetune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"statetune {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in SCHEMAS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat JSON file of option values")
        p.add_argument("--out", help=f"output directory (default ${{STATETUNE_OUT}} or {DEFAULT_OUT})")
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                       help="worker threads (default 1; runs are bit-exact at 1)")
        for opt in options:
            kw = {"dest": opt.name, "default": argparse.SUPPRESS,
                  "help": argparse.SUPPRESS if opt.hidden else opt.help}
            if opt.type is _bool:
                kw["action"] = "store_const"
                kw["const"] = True
            else:
                kw["type"] = opt.type
                if opt.choices:
                    kw["choices"] = opt.choices
            p.add_argument(opt.flag, **kw)
    rp = sub.add_parser("replay", help="rerun a manifest and compare output digests")
    rp.add_argument("manifest", help="manifest.json of an earlier run")
    rp.add_argument("--out", help="directory for the rerun (default: <run>/replay)")
    return parser


def resolve_config(command, flags: dict, config_path=None):
    """(config, sources) from defaults, an optional JSON file and parsed flags."""
    options = {o.name: o for o in SCHEMAS[command]}
    file_values = {}
    if config_path:
        try:
            file_values = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {config_path}: {exc}") from exc
        if not isinstance(file_values, dict):
            raise UsageError("config file must hold a flat JSON object")
        unknown = sorted(set(file_values) - set(options) - {"threads"})
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    config, sources = {}, {}
    for name, opt in options.items():
        if name in flags:
            value, src = flags[name], "flag"
        elif name in file_values:
            try:
                value = None if file_values[name] is None else opt.type(file_values[name])
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config key {name}: {exc}") from exc
            src = "file"
        else:
            value, src = opt.default, "default"
        if opt.choices and value is not None and value not in opt.choices:
            raise UsageError(f"{opt.flag} must be one of {', '.join(opt.choices)}")
        config[name], sources[name] = value, src
    missing = [options[n].flag for n in options if options[n].required and config[n] is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")
    if "threads" in flags:
        config["threads"], sources["threads"] = int(flags["threads"]), "flag"
    elif "threads" in file_values:
        config["threads"], sources["threads"] = int(file_values["threads"]), "file"
    else:
        config["threads"], sources["threads"] = 1, "default"
    if config["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    return config, sources


def resolve_out(flag_value):
    if flag_value:
        return Path(flag_value), "flag"
    if os.environ.get("STATETUNE_OUT"):
        return Path(os.environ["STATETUNE_OUT"]), "env"
    return Path(DEFAULT_OUT), "default"


# output digests ----------------------------------------------------------

def _sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def report_digest(path):
    """Digest of a report.jsonl with wall-clock fields removed."""
    h = hashlib.sha256()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        rec.pop("seconds", None)
        h.update(json.dumps(rec, sort_keys=True).encode())
    return h.hexdigest()


def output_digest(path):
    return report_digest(path) if Path(path).name == "report.jsonl" else _sha256_file(path)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default)
                          + "\n", encoding="utf-8")


class Run:
    """Output directory plus the manifest being assembled for one command."""

    def __init__(self, command, config, sources, out, out_source, argv=None):
        self.command = command
        self.config = config
        self.sources = {**sources, "out": out_source}
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs = []
        self.inputs = {}
        self.extra = {}
        self.deterministic = True
        self.argv = argv

    def path(self, name):
        p = self.out / name
        self.outputs.append(name)
        return p

    def finish(self, status, code):
        digests = {name: output_digest(self.out / name) for name in self.outputs
                   if (self.out / name).exists()}
        manifest = {"tool": "statetune", "version": __version__, "command": self.command,
                    "argv": self.argv, "config": self.config, "sources": self.sources,
                    "seed": self.config.get("seed"), "threads": self.config["threads"],
                    "backend": _backend.BACKEND, "deterministic": self.deterministic,
                    "inputs": self.inputs, "outputs": digests, "status": status,
                    "exit_code": code, **self.extra}
        _write_json(self.out / MANIFEST, manifest)
        return code


# commands ----------------------------------------------------------------

def cmd_gen_data(run: Run):
    c = run.config
    spec = TaskSpec(kind=c["task"], vocab_size=c["vocab"], pairs=c["pairs"], span=c["span"],
                    modulus=c["modulus"], n_train=c["n_train"], n_val=c["n_val"],
                    n_test=c["n_test"], seed=c["seed"])
    dataset = generate(spec)
    digest = save_dataset(dataset, run.path("dataset.jsonl"))
    run.extra["dataset_digest"] = digest
    print(f"dataset digest {digest}")
    return run.finish("ok", EXIT_OK)


def _model_dims(c, vocab):
    return ModelDims(vocab_size=vocab, embed_dim=c["embed_dim"], num_heads=c["heads"])


def _tensors(S0, model: StateModel):
    tensors = {"state.S0": S0}
    if model.lift is not None:
        tensors["kernel.supports"] = model.lift.supports.vectors
        tensors["kernel.q"] = model.lift.Q
    if model.decor is not None:
        tensors["dbp.R"] = model.decor.R
    return tensors


def _checkpoint_meta(model: StateModel, cfg: TuneConfig, extra=None):
    meta = {**weights_meta(model.weights), "regime": model.regime, "tune": cfg.to_dict(),
            "kernel": None if model.lift is None else model.lift.describe(),
            "dbp": None if model.decor is None else model.decor.settings()}
    return {**meta, **(extra or {})}


def cmd_tune(run: Run):
    c = run.config
    dataset = load_dataset(c["data"])
    run.inputs["data"] = dataset.digest()
    weights = FrozenWeights.generate(_model_dims(c, dataset.spec.vocab_size), c["weight_seed"],
                                     decay_bias=c["decay_bias"])
    cfg = TuneConfig(regime=c["regime"], epochs=c["epochs"], lr=c["lr"], lr_R=c["lr_R"],
                     kappa=c["kappa"], lam=c["lam"], batch_size=c["batch_size"], seed=c["seed"],
                     patience=c["patience"], subsample_frac=c["subsample_frac"],
                     ceiling=c["ceiling"])
    kcfg = None
    if cfg.regime != "standard":
        kcfg = KernelConfig(M=c["M"], gamma=c["gamma"], support_selection=c["support_selection"],
                            seed=c["kernel_seed"])
    hyper = cfg.to_dict()
    hyper["lr_S"] = hyper["lr"]
    run.extra["hyperparameters"] = hyper
    run.extra["weights"] = weights.describe()
    report = run.path("report.jsonl")
    records = []

    def on_epoch(rec):
        records.append(rec)
        write_report(records, report)

    try:
        result = tune(weights, dataset, cfg, kernel_cfg=kcfg, on_epoch=on_epoch)
    except DivergenceError as exc:
        last_good = exc.checkpoint
        path = run.path("checkpoint-last-good.stck")
        if last_good is not None:
            save_checkpoint(path, {"state.S0": last_good},
                            {**weights_meta(weights), "regime": cfg.regime, "tune": cfg.to_dict(),
                             "status": "diverged"})
        print(f"error: {exc}", file=sys.stderr)
        print(f"last good checkpoint: {path}", file=sys.stderr)
        run.extra["error"] = str(exc)
        return run.finish("diverged", EXIT_DIVERGED)
    save_checkpoint(run.path("checkpoint.stck"), _tensors(result.S0, result.model),
                    _checkpoint_meta(result.model, cfg, {"best_epoch": result.best_epoch}))
    if result.model.lift is not None:
        run.extra["kernel"] = result.model.lift.describe()
    run.extra["best_epoch"] = result.best_epoch
    best = result.report[result.best_epoch - 1] if result.best_epoch else result.report[-1]
    print(f"best epoch {result.best_epoch}: val accuracy {best['val_accuracy']:.4f}, "
          f"val loss {best['val_loss']:.4f}")
    return run.finish("ok", EXIT_OK)


def _load_model(c):
    """(model, S0) from a tune checkpoint, or frozen weights with a zero state."""
    if c["checkpoint"] is None:
        weights = FrozenWeights.generate(_model_dims(c, c["vocab"]), c["weight_seed"],
                                         decay_bias=c["decay_bias"])
        model = StateModel(weights)
        return model, model.initial_state(), None
    tensors, manifest = load_checkpoint(c["checkpoint"])
    weights = restore_weights(manifest)
    regime = manifest.get("regime", "standard")
    lift = decor = None
    if regime != "standard":
        info = manifest["kernel"]
        kcfg = KernelConfig(M=info["M"], gamma=info["gamma"],
                            support_selection=info["support_selection"], seed=info["seed"])
        if kcfg.support_selection == "random-gaussian":
            lift = KernelLift.build(kcfg, weights)
            verify_fixed_tensors(tensors, lift)
        else:
            lift = KernelLift(kcfg, SupportSet(tensors["kernel.supports"]), tensors["kernel.q"])
        if regime == "dbp":
            s = manifest["dbp"]
            decor = DecorrelationMatrix(kcfg.M, lr=s["lr_R"], kappa=s["kappa"],
                                        subsample_frac=s["subsample_frac"],
                                        seed=s["subsample_seed"], R=tensors["dbp.R"])
    model = StateModel(weights, regime, lift, decor)
    return model, tensors["state.S0"], _sha256_file(c["checkpoint"])


def cmd_testtime(run: Run):
    c = run.config
    tcfg = TestTimeConfig(iterations=c["iterations"], eta=c["eta"], tau=c["tau"],
                          greedy=c["greedy"], terminal_bonus=c["terminal_bonus"],
                          max_len=c["max_len"], seed=c["seed"], mode=c["mode"])
    model, S0, ckpt_digest = _load_model(c)
    if ckpt_digest:
        run.inputs["checkpoint"] = ckpt_digest
    V = model.weights.dims.vocab_size
    confidence = math.inf if c["confidence"] is None else c["confidence"]
    prompt, continuation = c["prompt"], c["continuation"]
    if c["data"] is not None:
        dataset = load_dataset(c["data"])
        run.inputs["data"] = dataset.digest()
        test = dataset["test"]
        if not 0 <= c["example"] < len(test):
            raise InputError(f"example {c['example']} outside the test split of {len(test)}")
        ex = test[c["example"]]
        prompt, continuation = ex.tokens[:ex.target_start], ex.target
    if c["teacher"] == "remote":
        if not c["teacher_url"]:
            raise UsageError("--teacher remote needs --teacher-url")
        teacher = RemoteTeacher(c["teacher_url"], V, c["timeout_ms"], c["retries"],
                                c["backoff_ms"])
        run.deterministic = False
    elif c["data"] is not None:
        teacher = scripted_teacher(ex, V, confidence)
    else:
        teacher = ScriptedTeacher(prompt, continuation, V, confidence)
    run.extra["testtime"] = {**tcfg.to_dict(), "lifted": model.regime != "standard"}
    run.extra["teacher"] = teacher.describe()
    transcript = run.path("transcript.json")
    try:
        result = guided_generate(model, S0, prompt, teacher, tcfg)
    except TeacherError as exc:
        print(f"teacher error: {exc}", file=sys.stderr)
        run.extra["error"] = str(exc)
        return run.finish("teacher-error", EXIT_TEACHER)
    teacher_tokens = [d["teacher_token"] for d in result.diagnostics]
    _write_json(transcript, {"prompt": prompt, "tokens": result.tokens,
                             "teacher_tokens": teacher_tokens,
                             "matches_teacher": result.tokens == teacher_tokens,
                             "regime": model.regime, "steps": result.diagnostics})
    if isinstance(teacher, RemoteTeacher):
        run.extra["teacher_retries"] = teacher.total_retries
    print(" ".join(map(str, result.tokens)))
    return run.finish("ok", EXIT_OK)


def cmd_gradcheck(run: Run):
    from .gradcheck import run_gradcheck
    c = run.config
    report = run_gradcheck(N=c["N"], T=c["T"], M=c["M"], gamma=c["gamma"], tol=c["tol"],
                           step=c["step"], seed=c["seed"], heads=c["heads"], vocab=c["vocab"],
                           fault=c["inject_fault"])
    _write_json(run.path("gradcheck.json"), report)
    for name, case in report["cases"].items():
        verdict = "pass" if case["passed"] else "FAIL"
        print(f"{name:>7s}: max relative error {case['max_rel_error']:.3e} "
              f"at {tuple(case['worst_index'])} [{verdict}]")
    if not report["passed"]:
        return run.finish("gradcheck-failed", EXIT_GRADCHECK)
    return run.finish("ok", EXIT_OK)


def cmd_bench(run: Run):
    from .bench import format_report, run_bench
    c = run.config
    report = run_bench(Ns=tuple(c["Ns"]), Ms=tuple(c["Ms"]), iters=c["iters"], seed=c["seed"])
    run.deterministic = False
    bench_path = run.out / "bench.json"  # timings: recorded but never digest-compared
    _write_json(bench_path, report)
    run.extra["bench_file"] = bench_path.name
    print(format_report(report))
    return run.finish("ok", EXIT_OK)


COMMANDS = {"gen-data": cmd_gen_data, "tune": cmd_tune, "testtime": cmd_testtime,
            "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def execute(command, config, sources, out, out_source="flag", argv=None):
    run = Run(command, config, sources, out, out_source, argv)
    return COMMANDS[command](run)


def cmd_replay(manifest_path, out=None):
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        command, config = manifest["command"], manifest["config"]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if command not in COMMANDS:
        raise FormatError(f"manifest names unknown command {command!r}")
    if not manifest.get("deterministic", True):
        print(f"{command} runs are not deterministic; nothing to compare")
        return EXIT_OK
    if manifest.get("backend") != _backend.BACKEND:
        print(f"warning: recorded backend {manifest.get('backend')} differs from "
              f"{_backend.BACKEND}; digests may differ in the last bits", file=sys.stderr)
    out = Path(out) if out else manifest_path.parent / "replay"
    sources = {k: "replay" for k in config}
    options = {o.name: o for o in SCHEMAS[command]}
    config = {k: (v if k == "threads" or v is None else options[k].type(v))
              for k, v in config.items()}
    code = execute(command, config, sources, out, "replay", ["replay", str(manifest_path)])
    fresh = json.loads((out / MANIFEST).read_text(encoding="utf-8"))
    expected, got = manifest.get("outputs", {}), fresh.get("outputs", {})
    ok = code == manifest.get("exit_code", EXIT_OK) and fresh.get("inputs") == manifest.get("inputs")
    for name in sorted(set(expected) | set(got)):
        same = expected.get(name) == got.get(name)
        ok &= same
        print(f"{'match' if same else 'MISMATCH':>8s}  {name}")
    print("replay reproduced all output digests" if ok else "replay differs")
    return EXIT_OK if ok else EXIT_MISMATCH


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            return cmd_replay(args.manifest, args.out)
        flags = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config", "out", "verbose")}
        config, sources = resolve_config(args.command, flags, args.config)
        out, out_source = resolve_out(args.out)
        if config["threads"] != 1:
            log.warning("threads=%d recorded; the scan itself is sequential", config["threads"])
        return execute(args.command, config, sources, out, out_source, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"statetune: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except TeacherError as exc:
        print(f"teacher error: {exc}", file=sys.stderr)
        return EXIT_TEACHER
    except (InputError, ConfigurationError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
