"""Command-line pipeline: family training, traces, ALM' fine-tuning, fitting, decoding, evaluation.

Every subcommand reads one JSON config (``--config``), applies dotted overrides such as
``--train.lr=1e-4`` and writes a resolved-config snapshot next to its outputs.
Exit codes: 0 success, 2 config or path error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("apdlab")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "paths": {"corpus": None, "family": "runs/family", "traces": "runs/traces.jsonl",
              "apd": "runs/apd", "curves": "runs/curves.jsonl", "prompts": None,
              "generations": "runs/generations.jsonl", "qa": None, "reports": "runs/reports"},
    "corpus": {"mode": "char", "valid_ratio": 0.1},
    "family": {"specs": [[8, 60, 60], [16, 256, 256], [32, 920, 920], [64, 3000, 3000]],
               "k": 3, "epochs": 5, "lr": 1e-3, "batch_size": 128, "optimizer": "adamw",
               "weight_decay": 0.01},
    "traces": {"layout": [20, 5, 5], "split": "train", "max_contexts": None},
    "train": {},
    "fit": {"max_records": None, "lambda2": 10.0},
    "decode": {"T": 1.0, "alpha": 0.1},
    "sampler": {"method": "top_p", "p": 0.95, "k": 20, "temperature": 1.0, "alpha": 0.1},
    "generate": {"max_new_tokens": 32, "n_continuations": 8, "sources": ["elm", "cd", "apd"]},
    "evaluate": {"methods": ["elm", "cd", "apd"], "criterion": "perplexity", "mrr_mode": "token"},
    "synthetic": {"n_words": 24, "n_lines": 3000, "line_len": 20, "n_qa": 500, "teacher_seed": 0,
                  "contextual": True},
    "toy": {},
}


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------- config handling


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            node[key] = {}
        node = node[key]
    node[keys[-1]] = value


def parse_overrides(extra: list[str]) -> list[tuple[str, object]]:
    out = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) <= 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, raw = body.split("=", 1)
        elif i + 1 < len(extra):
            key, raw = body, extra[i + 1]
            i += 1
        else:
            raise ConfigError(f"override {tok!r} has no value")
        out.append((key, _parse_value(raw)))
        i += 1
    return out


def _merge(base: dict, new: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(path: str | None, overrides: list[tuple[str, object]]) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, user)
    for key, value in overrides:
        apply_override(cfg, key, value)
    env_seed = os.environ.get("APD_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"APD_SEED must be an integer, got {env_seed!r}") from exc
    return cfg


def snapshot(cfg: dict, directory, name: str = "resolved_config.json") -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / name).write_text(json.dumps(cfg, indent=2, sort_keys=True))


def _path(cfg: dict, key: str, *, must_exist: bool = False) -> Path:
    value = cfg["paths"].get(key)
    if not value:
        raise ConfigError(f"paths.{key} is not set")
    p = Path(value)
    if must_exist and not p.exists():
        raise ConfigError(f"paths.{key} does not exist: {p}")
    return p


def _check_output(p: Path, force: bool) -> None:
    if p.exists() and (p.is_file() or any(p.iterdir())) and not force:
        raise ConfigError(f"{p} already exists (use --force to overwrite)")


# ---------------------------------------------------------------- commands


def cmd_train_family(cfg: dict, args) -> int:
    from .lm_family import Corpus, save_family, train_family

    corpus_path = _path(cfg, "corpus", must_exist=True)
    out = _path(cfg, "family")
    _check_output(out, args.force)
    c = cfg["corpus"]
    corpus = Corpus.from_file(corpus_path, mode=c["mode"], valid_ratio=c["valid_ratio"], seed=cfg["seed"])
    f = cfg["family"]
    fam = train_family(corpus, f["specs"], cfg["seed"], k=f["k"], epochs=f["epochs"], lr=f["lr"],
                       batch_size=f["batch_size"], optimizer=f["optimizer"],
                       weight_decay=f["weight_decay"])
    save_family(fam, out)
    snapshot(cfg, out)
    print(f"{'member':>6} {'params':>10} {'log_size':>9} {'heldout_ce':>11}")
    for e in fam.manifest["members"]:
        print(f"{e['index']:>6} {e['param_count']:>10} {e['log_size']:>9.4f} {e['heldout_ce']:>11.4f}")
    return 0


def _load_family(cfg: dict):
    from .lm_family import load_family

    return load_family(_path(cfg, "family", must_exist=True))


def cmd_collect_traces(cfg: dict, args) -> int:
    from .lm_family import UNK_ID, Corpus
    from .traces import collect_traces, write_traces

    fam = _load_family(cfg)
    corpus_path = _path(cfg, "corpus", must_exist=True)
    out = _path(cfg, "traces")
    _check_output(out, args.force)
    corpus = Corpus.from_file(corpus_path, vocab=fam.vocab, valid_ratio=cfg["corpus"]["valid_ratio"],
                              seed=cfg["seed"])
    if fam.manifest.get("corpus_hash") not in (None, corpus.text_hash):
        log.warning("corpus differs from the one the family was trained on")
    if any(np.any(ln == UNK_ID) for ln in corpus.lines):
        raise ConfigError("corpus contains tokens outside the family vocabulary")
    split = cfg["traces"]["split"]
    lines = {"train": corpus.train_lines, "valid": corpus.valid_lines, "all": corpus.lines}.get(split)
    if lines is None:
        raise ConfigError(f"traces.split must be train, valid or all, got {split!r}")
    tr = collect_traces(fam, lines, cfg["traces"]["layout"], seed=cfg["seed"],
                        max_contexts=cfg["traces"]["max_contexts"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_traces(tr, out)
    snapshot(cfg, out.parent, out.stem + ".config.json")
    mean_c = float(np.mean([len(r.cands) for r in tr.records])) if len(tr) else 0.0
    print(f"records: {len(tr)}  mean candidates: {mean_c:.2f}")
    return 0


def _train_config(cfg: dict):
    from .apd_training import TrainConfig

    t = dict(cfg["train"])
    if "lambda3" not in t:
        raise ConfigError("train.lambda3 must be set explicitly (it is family dependent)")
    t.setdefault("seed", cfg["seed"])
    try:
        return TrainConfig.from_dict(t)
    except TypeError as exc:
        raise ConfigError(f"bad train section: {exc}") from exc


def cmd_train_apd(cfg: dict, args) -> int:
    from .apd_training import save_mlp, train_alm_prime, write_config
    from .lm_family import save_model
    from .traces import read_traces

    tcfg = _train_config(cfg)
    fam = _load_family(cfg)
    traces = read_traces(_path(cfg, "traces", must_exist=True), family=fam)
    out = _path(cfg, "apd")
    _check_output(out, args.force)
    out.mkdir(parents=True, exist_ok=True)
    res = train_alm_prime(traces, fam.alm, tcfg, family_hash=fam.hash, log_path=out / "train_log.csv")
    save_model(res.alm_prime, out / "alm_prime.bin")
    save_mlp(res.mlp, out / "mlp.bin")
    write_config(tcfg, out / "train_config.json")
    snapshot(cfg, out)
    means = res.epoch_means()
    print(f"steps: {len(res.history)}  epoch mean loss: " + ", ".join(f"{m:.5f}" for m in means))
    return 0


def cmd_fit_curves(cfg: dict, args) -> int:
    from .curves import curve_dump_rows, fit_curves, write_curve_dump
    from .traces import read_traces

    traces = read_traces(_path(cfg, "traces", must_exist=True))
    out = _path(cfg, "curves")
    _check_output(out, args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    recs = traces.records
    if cfg["fit"]["max_records"] is not None:
        recs = recs[: cfg["fit"]["max_records"]]
    rows = []
    for r in recs:
        fit = fit_curves(np.asarray(r.probs, dtype=np.float64).T, traces.log_sizes,
                         lambda2=cfg["fit"]["lambda2"])
        rows.extend(curve_dump_rows(r.ctx_id, r.cands, fit))
    n = write_curve_dump(out, rows)
    snapshot(cfg, out.parent, out.stem + ".config.json")
    print(f"fitted curves: {n}")
    return 0


def _load_alm_prime(cfg: dict, fam, required: bool):
    from .lm_family import load_model

    p = _path(cfg, "apd") / "alm_prime.bin"
    if not p.exists():
        if required:
            raise ConfigError(f"no fine-tuned amateur at {p}; run train-apd first")
        return None
    return load_model(p, expected_vocab_hash=fam.vocab.hash)


def cmd_decode(cfg: dict, args) -> int:
    from .cd_core import DecodeConfig
    from .lm_family import tokenize
    from .sampling import GenerationRequest, SamplerConfig, generate, generation_rows, write_generations

    fam = _load_family(cfg)
    prompts = [ln for ln in _path(cfg, "prompts", must_exist=True).read_text().splitlines() if ln.strip()]
    out = _path(cfg, "generations")
    _check_output(out, args.force)
    g = cfg["generate"]
    sources = list(g["sources"])
    alm_prime = _load_alm_prime(cfg, fam, "apd" in sources)
    try:
        decode = DecodeConfig(T=cfg["decode"]["T"], alpha=cfg["decode"]["alpha"])
        sampler = SamplerConfig(seed=cfg["seed"], **cfg["sampler"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    rows = []
    for pid, text in enumerate(prompts):
        ids = tuple(tokenize(text, fam.vocab))
        for source in sources:
            req = GenerationRequest(ids, g["max_new_tokens"], g["n_continuations"], source, pid)
            conts = generate(req, fam.elm, alm=fam.alm, alm_prime=alm_prime, decode=decode, sampler=sampler)
            for row in generation_rows(req, conts, fam.vocab):
                row["source"] = source
                rows.append(row)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_generations(out, rows)
    snapshot(cfg, out.parent, out.stem + ".config.json")
    print(f"continuations written: {n}")
    return 0


def load_qa(path) -> list:
    from .evaluation import QAItem

    return [QAItem.from_dict(json.loads(ln)) for ln in Path(path).read_text().splitlines() if ln.strip()]


def cmd_evaluate(cfg: dict, args) -> int:
    from .evaluation import QAHarness, mean_dist_n, rep_ratio, sweep

    fam = _load_family(cfg)
    out = _path(cfg, "reports")
    _check_output(out, args.force)
    out.mkdir(parents=True, exist_ok=True)
    ev = cfg["evaluate"]
    summary: dict = {}
    qa_path = cfg["paths"].get("qa")
    if qa_path:
        items = load_qa(_path(cfg, "qa", must_exist=True))
        methods = list(ev["methods"])
        models = {"elm": fam.elm, "alm": fam.alm}
        if "apd" in methods:
            models["alm_prime"] = _load_alm_prime(cfg, fam, True)
        harness = QAHarness(items, models)
        reports, best = sweep(harness, methods, criterion=ev["criterion"])
        with open(out / "reports.jsonl", "w") as fh:
            for r in reports:
                fh.write(r.to_json() + "\n")
        summary["qa"] = {m: r.to_dict() for m, r in best.items()}
        summary["qa_counts"] = harness.counts
        if args.plot_data:
            for m in methods:
                with open(out / f"plot_{m}.csv", "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["inv_T", "perplexity", "accuracy", "mrr"])
                    for r in reports:
                        if r.label["method"] == m:
                            w.writerow([r.label["inv_T"], r.perplexity, r.accuracy, r.mrr])
        for m, r in best.items():
            print(f"{m:>5}  best 1/T={r.label['inv_T']}  ppl={r.perplexity:.4f}  "
                  f"acc={r.accuracy:.4f}  mrr={r.mrr:.4f}")
    gen_path = cfg["paths"].get("generations")
    if gen_path and Path(gen_path).exists():
        by_source: dict = {}
        for ln in Path(gen_path).read_text().splitlines():
            row = json.loads(ln)
            by_source.setdefault(row.get("source", "?"), {}).setdefault(row["prompt_id"], []).append(row["token_ids"])
        summary["generation"] = {}
        for src, prompts in by_source.items():
            conts = [c for cs in prompts.values() for c in cs]
            summary["generation"][src] = {"dist_2": mean_dist_n(list(prompts.values()), 2),
                                          "rep": rep_ratio(conts)}
            print(f"{src:>5}  dist-2={summary['generation'][src]['dist_2']:.4f}  "
                  f"rep={summary['generation'][src]['rep']:.4f}")
    if not summary:
        raise ConfigError("nothing to evaluate: set paths.qa and/or paths.generations")
    (out / "best.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    snapshot(cfg, out)
    return 0


def cmd_theorem_check(cfg: dict, args) -> int:
    from .cd_core import verify_theorem

    rng = np.random.default_rng(cfg["seed"])
    worst = 0.0
    for T in (1.5, 2.0, 4.0, 10.0):
        for _ in range(args.n):
            a = rng.uniform(10, 20)
            e = a + rng.uniform(0.5, 5)
            worst = max(worst, verify_theorem(rng.normal(size=64), rng.normal(size=64), a, e, T))
    print(json.dumps({"max_discrepancy": worst, "configurations": 4 * args.n}))
    return 0 if worst < 1e-9 else EXIT_NUMERIC


def cmd_probe_blindness(cfg: dict, args) -> int:
    from .evaluation import obvious_blindness_probe

    print(json.dumps(obvious_blindness_probe(), indent=2))
    return 0


def cmd_make_synthetic(cfg: dict, args) -> int:
    from . import synthetic as syn

    s = cfg["synthetic"]
    corpus = _path(cfg, "corpus")
    _check_output(corpus, args.force)
    teacher = syn.make_teacher(s["n_words"], seed=s["teacher_seed"])
    lines = syn.sample_lines(teacher, s["n_lines"], s["line_len"], seed=cfg["seed"])
    corpus.parent.mkdir(parents=True, exist_ok=True)
    corpus.write_text(syn.lines_to_text(teacher, lines))
    qa_path = cfg["paths"].get("qa")
    if qa_path:
        qa = syn.make_qa(teacher, syn.teacher_vocab(teacher), s["n_qa"], seed=cfg["seed"] + 1,
                         contextual=s["contextual"])
        Path(qa_path).write_text("".join(json.dumps(it.to_dict()) + "\n" for it in qa.items))
    print(f"wrote {len(lines)} lines to {corpus}" + (f" and {s['n_qa']} QA items to {qa_path}" if qa_path else ""))
    return 0


def cmd_toy_experiment(cfg: dict, args) -> int:
    from .synthetic import ToyConfig, run_toy_experiment

    opts = dict(cfg["toy"])
    opts.setdefault("seed", cfg["seed"])
    try:
        toy = ToyConfig(**opts)
    except TypeError as exc:
        raise ConfigError(f"bad toy section: {exc}") from exc
    out = run_toy_experiment(toy)
    for m in out["family"]:
        print(f"member {m['index']}: {m['param_count']} params, held-out CE {m['heldout_ce']:.4f}")
    print(f"traces: {out['n_traces']}  qa: {out['counts']}")
    for name, r in out["best"].items():
        print(f"{name:>5}  best 1/T={r.label['inv_T']}  ppl={r.perplexity:.4f}  acc={r.accuracy:.4f}  mrr={r.mrr:.4f}")
    if cfg["paths"].get("reports"):
        d = _path(cfg, "reports")
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "toy_reports.jsonl", "w") as fh:
            for r in out["reports"]:
                fh.write(r.to_json() + "\n")
        snapshot(cfg, d, "toy_config.json")
    return 0


COMMANDS = {
    "train-family": cmd_train_family,
    "collect-traces": cmd_collect_traces,
    "train-apd": cmd_train_apd,
    "fit-curves": cmd_fit_curves,
    "decode": cmd_decode,
    "evaluate": cmd_evaluate,
    "theorem-check": cmd_theorem_check,
    "probe-blindness": cmd_probe_blindness,
    "make-synthetic": cmd_make_synthetic,
    "toy-experiment": cmd_toy_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="apdlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--threads", type=int, default=None, help="cap torch worker threads")
        sp.add_argument("--plot-data", action="store_true", help="also write x/y series for plotting")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "theorem-check":
            sp.add_argument("--n", type=int, default=50, help="configurations per temperature")
    return p


def main(argv: list[str] | None = None) -> int:
    from .apd_training import TraceMismatchError, TrainingAbortedError
    from .containers import ContainerError
    from .lm_family import TrainingDivergedError
    from .traces import TraceFormatError

    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, parse_overrides(extra))
        if args.threads is not None:
            import torch

            torch.set_num_threads(max(1, args.threads))
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ContainerError, TraceFormatError, TraceMismatchError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAbortedError, TrainingDivergedError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
