"""Command-line front end: ``csasr {gen,train,decode,train-lm,dump-attention,ablate,replay}``.

Every command resolves its flags and config file into a plan, writes the
plan as ``manifest.json`` in the output directory, then executes it.
``replay`` re-executes a manifest's plan into a new directory, so a
manifest alone determines a run.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from csasr import __version__
from csasr.data import LANG_NAMES, SPLITS, SyntheticSpec, generate_corpus, normalize, read_corpus, write_corpus
from csasr.decoding import DecodeConfig, DecodeResult, exhaustive_search, model_scorers, nbest_lines, strip
from csasr.errors import ConfigError, TrainingDiverged, UsageError
from csasr.lm import LmConfig, TransformerLM, check_vocab, load_lm, perplexity, save_lm, train_lm, unigram_perplexity
from csasr.metrics import corpus_mer, export_attention
from csasr.model import PRESETS, IlbModel, ModelConfig, load_model, save_model
from csasr.training import TrainConfig, load_averaged, train

logger = logging.getLogger("csasr")

CORPUS_ENV = "CSASR_CORPUS_ROOT"
MANIFEST = "manifest.json"

# small enough for a CI smoke run in well under five minutes
MICRO_MODEL = {"model_dim": 16, "heads": 2, "encoder_layers": 1, "decoder_layers": 1,
               "ld_decoder_layers": 1, "ffn_dim": 32, "conv_kernel": 3}


# -- config plumbing ---------------------------------------------------------------------


def parse_value(raw: str, current):
    """Coerce ``raw`` to the type of a dataclass field's current value."""
    if isinstance(current, bool):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ConfigError(f"expected true/false, got {raw!r}")
        return raw.lower() in ("true", "1")
    if isinstance(current, tuple):
        return tuple(int(v) for v in raw.split(","))
    if current is None:
        return None if raw.lower() == "none" else int(raw)
    return type(current)(raw)


def with_overrides(obj, overrides: dict):
    """``dataclasses.replace`` with string values coerced to each field's type."""
    names = {f.name for f in dataclasses.fields(obj)}
    kw = {}
    for key, raw in overrides.items():
        if key not in names or key == "flags":
            raise ConfigError(f"unknown setting {key!r} for {type(obj).__name__}")
        try:
            kw[key] = parse_value(str(raw), getattr(obj, key))
        except ValueError as exc:
            raise ConfigError(f"{type(obj).__name__}.{key}: {exc}") from None
    return dataclasses.replace(obj, **kw)


def read_config_file(path) -> dict:
    """``section.key=value`` lines (``#`` comments) -> ``{section: {key: value}}``."""
    out: dict = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"{path}:{n}: expected section.key=value")
        if section not in ("model", "train", "decode", "data", "lm"):
            raise ConfigError(f"{path}:{n}: unknown section {section!r}")
        out.setdefault(section, {})[name.strip()] = value.strip()
    return out


def as_items(obj) -> dict:
    return {f.name: getattr(obj, f.name) if not isinstance(getattr(obj, f.name), tuple)
            else list(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def from_items(cls, items: dict):
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in items.items()}
    return cls(**kw)


def resolve_corpus(value) -> str:
    root = os.environ.get(CORPUS_ENV)
    if value is None:
        if not root:
            raise UsageError(f"no --corpus given and ${CORPUS_ENV} is unset")
        return str(Path(root).resolve())
    p = Path(value)
    if not p.is_absolute() and not p.exists() and root:
        p = Path(root) / p
    return str(p.resolve())


def default_run_dir(seed: int) -> Path:
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    return Path("runs") / f"{stamp}-seed{seed}"


def prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"{out} exists and is not empty (use --force)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, plan: dict, artifacts: list) -> None:
    manifest = {
        "command": command,
        "plan": plan,
        "seed": plan.get("seed"),
        "artifacts": artifacts,
        "version": __version__,
        "created": datetime.datetime.now().isoformat(timespec="seconds"),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def require(paths) -> None:
    for p in paths:
        p = Path(p)
        if not p.exists() or (p.is_file() and p.stat().st_size == 0):
            raise UsageError(f"declared output missing or empty: {p}")


# -- gen ---------------------------------------------------------------------------------


def plan_gen(args, cfg: dict) -> dict:
    spec = SyntheticSpec()
    if args.spec:
        spec = with_overrides(spec, dict(line.split("=", 1) for line in
                                         Path(args.spec).read_text().splitlines() if "=" in line))
    spec = with_overrides(spec, cfg.get("data", {}))
    flags = {"switch_prob": args.switch_prob, "n_train": args.n_train, "n_dev": args.n_dev,
             "n_test": args.n_test, "seed": args.seed}
    spec = dataclasses.replace(spec, **{k: v for k, v in flags.items() if v is not None})
    return {"data": as_items(spec), "seed": spec.seed}


def exec_gen(plan: dict, out: Path) -> list:
    spec = from_items(SyntheticSpec, plan["data"])
    write_corpus(generate_corpus(spec), out)
    files = [out / "spec.txt"] + [out / f"{s}.utts" for s in SPLITS]
    require(files)
    read_corpus(out)
    return [str(f) for f in files]


# -- train -------------------------------------------------------------------------------


def model_config(preset: str, corpus, overrides: dict, micro: bool = False) -> ModelConfig:
    base = dict(MICRO_MODEL) if micro else {}
    base.update(feature_dim=corpus.spec.feature_dim, vocab_size=corpus.vocab.size)
    cfg = ModelConfig.from_preset(preset, **base)
    return with_overrides(cfg, overrides)


def plan_train(args, cfg: dict) -> dict:
    if args.preset not in PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r}; choose from {', '.join(PRESETS)}")
    corpus_dir = resolve_corpus(args.corpus)
    corpus = read_corpus(corpus_dir)
    mcfg = model_config(args.preset, corpus, cfg.get("model", {}), args.micro)
    tcfg = with_overrides(TrainConfig(seed=args.seed), cfg.get("train", {}))
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    return {"corpus": corpus_dir, "preset": args.preset, "model": mcfg.to_items(), "train": as_items(tcfg),
            "seed": tcfg.seed, "keep_epochs": bool(args.keep_epochs)}


def exec_train(plan: dict, out: Path) -> list:
    raw = read_corpus(plan["corpus"])
    corpus = normalize(raw)
    mean, std = corpus.stats
    buffers = {"norm_mean": mean, "norm_std": std}
    mcfg = ModelConfig.from_items(plan["model"])
    tcfg = from_items(TrainConfig, plan["train"])
    model = IlbModel(mcfg, seed=tcfg.seed)
    try:
        result = train(model, corpus, tcfg, out_dir=out, buffers=buffers)
    except TrainingDiverged as exc:
        logger.error("%s (last good checkpoint: %s)", exc, exc.last_checkpoint)
        raise
    load_averaged(model, result.averaged)
    final = out / "final.ckpt"
    chosen = sorted(result.history, key=lambda r: (r.dev["loss"], r.epoch))[:tcfg.average_top_k]
    meta = {"preset": plan["preset"], "seed": tcfg.seed,
            "averaged_epochs": ",".join(str(r.epoch) for r in sorted(chosen, key=lambda r: r.epoch))}
    save_model(model, final, meta=meta, buffers=buffers)
    if not plan.get("keep_epochs", False):
        for rec in result.history:
            if rec.path is not None and rec.path.exists():
                rec.path.unlink()
    require([final, out / "metrics.log"])
    load_model(final)
    if len((out / "metrics.log").read_text().splitlines()) != tcfg.epochs:
        raise UsageError("metrics.log does not have one line per epoch")
    return [str(final), str(out / "metrics.log")]


# -- decode ------------------------------------------------------------------------------


def load_for_decoding(model_path, corpus_dir):
    model, meta, buffers = load_model(model_path)
    raw = read_corpus(corpus_dir)
    if model.cfg.vocab_size != raw.vocab.size or model.cfg.feature_dim != raw.spec.feature_dim:
        raise ConfigError(f"checkpoint/config mismatch: model vocab {model.cfg.vocab_size} "
                          f"feature_dim {model.cfg.feature_dim} vs corpus vocab {raw.vocab.size} "
                          f"feature_dim {raw.spec.feature_dim}")
    if "norm_mean" not in buffers:
        raise ConfigError(f"{model_path}: checkpoint carries no normalization statistics")
    corpus = normalize(raw, (buffers["norm_mean"], buffers["norm_std"]))
    return model, corpus


def plan_decode(args, cfg: dict) -> dict:
    dcfg = DecodeConfig()
    dcfg = with_overrides(dcfg, cfg.get("decode", {}))
    exhaustive = args.beam == "exhaustive"
    kw = {k: v for k, v in {"alpha": args.alpha, "lm_weight": args.lm_weight, "max_len": args.max_len}.items()
          if v is not None}
    if not exhaustive and args.beam is not None:
        kw["beam"] = int(args.beam)
    dcfg = dataclasses.replace(dcfg, **kw)
    if exhaustive and dcfg.max_len is None:
        raise UsageError("--beam exhaustive needs --max-len")
    return {"model": str(Path(args.model).resolve()), "corpus": resolve_corpus(args.corpus),
            "split": args.split, "decode": as_items(dcfg), "exhaustive": exhaustive,
            "lm": str(Path(args.lm).resolve()) if args.lm else None,
            "nbest": args.nbest if args.nbest is not None else dcfg.beam, "limit": args.limit,
            "seed": None}


def exec_decode(plan: dict, out: Path) -> list:
    model, corpus = load_for_decoding(plan["model"], plan["corpus"])
    dcfg = from_items(DecodeConfig, plan["decode"])
    lm = None
    if plan["lm"]:
        lm = load_lm(plan["lm"])
        check_vocab(lm, corpus.vocab)
        # a zero-weight LM cannot change any ranking; dropping it keeps outputs identical to no --lm
        if dcfg.lm_weight == 0:
            lm = None
    utts = corpus[plan["split"]]
    if plan["limit"]:
        utts = utts[: plan["limit"]]
    lines, hyp_lines, pairs = [], [], []
    for u in utts:
        if plan["exhaustive"]:
            att_fn, ctc_lp = model_scorers(model, u.x)
            lm_fn = lm.next_log_probs if lm is not None else None
            ranked = exhaustive_search(att_fn, ctc_lp, dcfg, model.cfg.vocab_size, model.sos, model.eos, lm_fn)
            res = DecodeResult(ranked[0], ranked[: plan["nbest"]], ranked)
        else:
            from csasr.decoding import joint_beam_search

            res = joint_beam_search(model, u.x, dcfg, lm=lm, vocab=corpus.vocab, nbest=plan["nbest"])
        hyp = strip(res.best.tokens, model.eos)
        pairs.append((hyp, u.tokens))
        lines += nbest_lines(u.id, res, model.eos)
        hyp_lines.append(f"{u.id} {' '.join(map(str, hyp))}".rstrip())
    report = corpus_mer(pairs, lambda t: LANG_NAMES[corpus.vocab.lang_of(t)])
    (out / "nbest.txt").write_text("\n".join(lines) + "\n")
    (out / "hyp.txt").write_text("\n".join(hyp_lines) + "\n")
    (out / "mer.txt").write_text(report.summary())
    files = [out / "nbest.txt", out / "hyp.txt", out / "mer.txt"]
    require(files)
    print(report.summary().splitlines()[0])
    return [str(f) for f in files]


# -- train-lm ----------------------------------------------------------------------------


LM_TRAIN_DEFAULTS = {"epochs": 10, "batch_size": 32, "peak_lr": 2e-3, "warmup_steps": 200}


def plan_train_lm(args, cfg: dict) -> dict:
    corpus_dir = resolve_corpus(args.corpus)
    corpus = read_corpus(corpus_dir)
    lcfg = LmConfig(vocab_size=corpus.vocab.size, vocab_fingerprint=corpus.vocab.fingerprint())
    section = dict(cfg.get("lm", {}))
    schedule = dict(LM_TRAIN_DEFAULTS)
    for key in list(section):
        if key in schedule:
            schedule[key] = parse_value(section.pop(key), schedule[key])
    lcfg = with_overrides(lcfg, section)
    if args.layers is not None:
        lcfg = dataclasses.replace(lcfg, layers=args.layers)
    if args.epochs is not None:
        schedule["epochs"] = args.epochs
    return {"corpus": corpus_dir, "lm": as_items(lcfg), "schedule": schedule, "seed": args.seed}


def exec_train_lm(plan: dict, out: Path) -> list:
    corpus = read_corpus(plan["corpus"])
    vocab = corpus.vocab
    lm = TransformerLM(from_items(LmConfig, plan["lm"]), seed=plan["seed"])
    train_seqs = [u.tokens for u in corpus["train"]]
    dev_seqs = [u.tokens for u in corpus["dev"]]
    history = train_lm(lm, train_seqs, vocab, seed=plan["seed"], dev_seqs=dev_seqs, **plan["schedule"])
    path = out / "lm.ckpt"
    save_lm(lm, path, meta={"seed": plan["seed"]})
    uni = unigram_perplexity(train_seqs, dev_seqs, vocab)
    lines = [f"epoch {i} dev_ppl {p!r}" for i, p in enumerate(history, 1)]
    lines += [f"final_dev_ppl={perplexity(lm, dev_seqs, vocab)!r}", f"unigram_dev_ppl={uni!r}"]
    (out / "ppl.txt").write_text("\n".join(lines) + "\n")
    require([path, out / "ppl.txt"])
    load_lm(path)
    return [str(path), str(out / "ppl.txt")]


# -- dump-attention ----------------------------------------------------------------------


def plan_dump(args, cfg: dict) -> dict:
    return {"model": str(Path(args.model).resolve()), "corpus": resolve_corpus(args.corpus),
            "split": args.split, "utt": args.utt, "seed": None}


def exec_dump(plan: dict, out: Path) -> list:
    model, corpus = load_for_decoding(plan["model"], plan["corpus"])
    if model.ld_decoder is None:
        raise ConfigError("dump-attention needs a model with an LD decoder (preset 1.0 has none)")
    found = [u for u in corpus[plan["split"]] if u.id == plan["utt"]]
    if not found:
        raise UsageError(f"utterance {plan['utt']!r} not in split {plan['split']!r}")
    utt = found[0]
    fo = model.forward_all(utt)
    paths = export_attention(fo, utt, out, model.cfg.subsample_factor, corpus.vocab.lang_of)
    require(paths)
    if len(paths) != model.cfg.heads:
        raise UsageError(f"expected {model.cfg.heads} attention files, wrote {len(paths)}")
    return [str(p) for p in paths]


# -- ablate ------------------------------------------------------------------------------


def plan_ablate(args, cfg: dict) -> dict:
    corpus_dir = resolve_corpus(args.corpus)
    corpus = read_corpus(corpus_dir)
    presets = args.presets.split(",") if args.presets else list(PRESETS)
    for p in presets:
        if p not in PRESETS:
            raise ConfigError(f"unknown preset {p!r}")
    seeds = list(range(args.seed, args.seed + args.seeds))
    models = {p: model_config(p, corpus, cfg.get("model", {}), args.micro).to_items() for p in presets}
    tcfg = with_overrides(TrainConfig(), cfg.get("train", {}))
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    dcfg = with_overrides(DecodeConfig(), cfg.get("decode", {}))
    lm = None
    if args.lm:
        lm = {"path": str(Path(args.lm).resolve())}
    elif not args.no_lm:
        lm_args = argparse.Namespace(corpus=corpus_dir, layers=args.lm_layers, epochs=args.lm_epochs,
                                     seed=args.seed)
        lm = {"train": plan_train_lm(lm_args, cfg)}
    return {"corpus": corpus_dir, "presets": presets, "seeds": seeds, "models": models,
            "train": as_items(tcfg), "decode": as_items(dcfg), "lm": lm, "jobs": args.jobs,
            "limit": args.limit, "seed": args.seed}


def run_job(plan: dict, preset: str, seed: int, job_dir: str, lm_path) -> dict:
    """Train one preset x seed and evaluate it; cached through ``result.json``."""
    from csasr.experiment import evaluate_model, read_json, write_json

    job = Path(job_dir)
    cached = read_json(job / "result.json")
    if cached is not None:
        return cached
    if job.exists():
        shutil.rmtree(job)
    job.mkdir(parents=True)
    train_plan = {"corpus": plan["corpus"], "preset": preset, "model": plan["models"][preset],
                  "train": dict(plan["train"], seed=seed), "seed": seed, "keep_epochs": False}
    write_manifest(job, "train", train_plan, [])
    exec_train(train_plan, job)
    model, corpus = load_for_decoding(job / "final.ckpt", plan["corpus"])
    if plan.get("limit"):
        corpus.splits = {k: v[: plan["limit"]] for k, v in corpus.splits.items()}
    lm = load_lm(lm_path) if lm_path else None
    result = evaluate_model(model, corpus, from_items(DecodeConfig, plan["decode"]), lm=lm)
    result = {k: float(v) for k, v in result.items()}
    write_json(job / "result.json", result)
    return result


def exec_ablate(plan: dict, out: Path) -> list:
    from csasr.experiment import format_report, summarize, write_json

    lm_path = None
    if plan["lm"] is not None:
        if "path" in plan["lm"]:
            lm_path = plan["lm"]["path"]
        else:
            lm_dir = out / "lm"
            lm_path = str(lm_dir / "lm.ckpt")
            if not Path(lm_path).exists():
                lm_dir.mkdir(parents=True, exist_ok=True)
                write_manifest(lm_dir, "train-lm", plan["lm"]["train"], [])
                exec_train_lm(plan["lm"]["train"], lm_dir)
    jobs = [(p, s, str(out / "jobs" / f"{p}-seed{s}")) for p in plan["presets"] for s in plan["seeds"]]
    results: dict = {}
    if plan.get("jobs", 1) > 1:
        with ProcessPoolExecutor(plan["jobs"]) as pool:
            futures = {pool.submit(run_job, plan, p, s, d, lm_path): (p, s) for p, s, d in jobs}
            for fut, (p, s) in futures.items():
                results.setdefault(p, {})[str(s)] = fut.result()
    else:
        for p, s, d in jobs:
            logger.info("ablate: preset %s seed %d", p, s)
            results.setdefault(p, {})[str(s)] = run_job(plan, p, s, d, lm_path)
    report = format_report(results, plan["seeds"], lm_path is not None, plan["presets"])
    (out / "report.txt").write_text(report)
    write_json(out / "results.json", results)
    write_json(out / "summary.json", summarize(results, plan["seeds"]))
    print(report, end="")
    files = [out / "report.txt", out / "results.json", out / "summary.json"]
    require(files)
    body = report.splitlines()[2:2 + len(plan["presets"])]
    if [line.split()[0] for line in body] != plan["presets"]:
        raise UsageError("report rows do not match the requested presets")
    return [str(f) for f in files]


# -- dispatch ----------------------------------------------------------------------------


COMMANDS = {
    "gen": (plan_gen, exec_gen),
    "train": (plan_train, exec_train),
    "decode": (plan_decode, exec_decode),
    "train-lm": (plan_train_lm, exec_train_lm),
    "dump-attention": (plan_dump, exec_dump),
    "ablate": (plan_ablate, exec_ablate),
}

# commands whose output directory may be reused to resume cached work
RESUMABLE = {"ablate"}


def run_plan(command: str, plan: dict, out: Path, force: bool, resume: bool = False) -> list:
    if resume and command in RESUMABLE and (out / MANIFEST).exists():
        old = json.loads((out / MANIFEST).read_text())
        if old["plan"] != plan:
            raise UsageError(f"{out}: existing manifest has a different plan; use --force to restart")
    else:
        out = prepare_out(out, force)
    write_manifest(out, command, plan, [])
    artifacts = COMMANDS[command][1](plan, out)
    write_manifest(out, command, plan, artifacts)
    return artifacts


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="csasr", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True, seed_default=0):
        p.add_argument("--out", help="output directory (default runs/<timestamp>-seed<k>)")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        p.add_argument("--config", help="key=value file with model./train./decode./data./lm. overrides")
        if seed:
            p.add_argument("--seed", type=int, default=seed_default)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    common(p, seed_default=None)
    p.add_argument("--spec", help="key=value SyntheticSpec file")
    p.add_argument("--switch-prob", type=float)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-dev", type=int)
    p.add_argument("--n-test", type=int)

    p = sub.add_parser("train", help="train one preset")
    common(p)
    p.add_argument("--preset", required=True)
    p.add_argument("--corpus", "--corpus-dir", dest="corpus")
    p.add_argument("--epochs", type=int)
    p.add_argument("--micro", action="store_true", help="tiny model for smoke runs")
    p.add_argument("--keep-epochs", action="store_true", help="keep per-epoch checkpoints")

    p = sub.add_parser("decode", help="joint CTC/attention decoding and MER")
    common(p, seed=False)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", "--corpus-dir", dest="corpus")
    p.add_argument("--split", "--corpus-split", dest="split", default="test", choices=SPLITS)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beam", help="beam width or 'exhaustive' (needs --max-len)")
    p.add_argument("--max-len", type=int)
    p.add_argument("--lm")
    p.add_argument("--lambda", dest="lm_weight", type=float)
    p.add_argument("--nbest", type=int)
    p.add_argument("--limit", type=int, help="decode only the first N utterances")

    p = sub.add_parser("train-lm", help="train the external transformer LM")
    common(p)
    p.add_argument("--corpus", "--corpus-dir", dest="corpus")
    p.add_argument("--layers", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("dump-attention", help="export LD-decoder attention matrices")
    common(p, seed=False)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", "--corpus-dir", dest="corpus")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--utt", required=True)

    p = sub.add_parser("ablate", help="train and evaluate presets x seeds")
    common(p)
    p.add_argument("--corpus", "--corpus-dir", dest="corpus")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, starting at --seed")
    p.add_argument("--presets", help="comma-separated subset (default all seven)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--micro", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--lm", help="existing LM checkpoint for the fusion column")
    p.add_argument("--no-lm", action="store_true", help="skip the LM fusion column")
    p.add_argument("--lm-layers", type=int)
    p.add_argument("--lm-epochs", type=int)
    p.add_argument("--limit", type=int, help="evaluate on the first N dev/test utterances")

    p = sub.add_parser("replay", help="re-run a manifest into a new directory")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            manifest = json.loads(Path(args.manifest).read_text())
            run_plan(manifest["command"], manifest["plan"], Path(args.out), args.force)
            return 0
        cfg = read_config_file(args.config) if args.config else {}
        plan = COMMANDS[args.command][0](args, cfg)
        seed = plan.get("seed") or 0
        out = Path(args.out) if args.out else default_run_dir(seed)
        run_plan(args.command, plan, out, args.force, resume=True)
        return 0
    except (ConfigError, UsageError, TrainingDiverged, FileNotFoundError) as exc:
        print(f"csasr {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
