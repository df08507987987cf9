"""Command-line entry points wiring the modules into reproducible runs.

Every command reads a flat sectioned config (defaults below), applies
--override section.key=value pairs, echoes the effective config into the
output directory before doing any work, and streams metrics as key=value
lines. Exit codes: 0 success, 1 runtime failure, 2 config error.
"""
from __future__ import annotations

import argparse
import configparser
import os
import sys

import numpy as np

from . import autodiff as ad
from . import control as ctl
from .checkpoint import (load_checkpoint, load_params, save_checkpoint,
                         save_params)
from .corpus import (OracleCorpus, control_success, easy_spec, generate_corpus,
                     hard_spec, lm_score, micro_spec, save_records)
from .denoiser import Denoiser, ModelConfig
from .embedding import EmbeddingTable, seq_length
from .exceptions import ConfigError
from .objectives import TrainConfig, nll_bound, rounding_accuracy, train
from .sampler import SampleConfig, generate, save_samples
from .schedules import build_schedule, downsample

DEFAULTS = {
    "corpus": {
        "spec": "easy", "seed": "0",
        "train_size": "4096", "dev_size": "512", "test_size": "512",
    },
    "model": {
        "seq_len": "16", "embed_dim": "16", "hidden": "128",
        "blocks": "4", "heads": "4", "dropout": "0.1",
    },
    "schedule": {"kind": "sqrt", "timesteps": "2000", "s": "1e-4"},
    "train": {
        "iterations": "6000", "batch_size": "32", "lr": "3e-3",
        "weight_decay": "0.0", "lr_decay_iters": "none",
        "rounding_weight": "none",
        "parametrization": "x0", "objective": "simple",
        "eval_every": "250", "stop_at_accuracy": "none", "seed": "0",
    },
    "sample": {
        "k": "16", "clamping": "always", "resample_mode": "marginal_anchor",
        "downsample": "1", "seed": "0",
    },
    "classifier": {
        "kind": "semantic_content", "iterations": "1500", "lr": "1e-3",
        "hidden": "64", "blocks": "2", "heads": "4", "seed": "0",
    },
    "control": {
        "lambda": "0.01", "inner_steps": "3", "adagrad_lr": "0.1",
        "downsample": "10", "k": "8", "seed": "0",
    },
    "paths": {
        "model": "model.ckpt", "classifier": "classifier.ckpt",
        "tasks": "tasks.txt",
    },
    "gradcheck": {"seed": "0"},
    "ablate": {"dims": "16,64", "iterations": "600", "samples": "64"},
}


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = {s: dict(kv) for s, kv in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path!r}")
        for section in parser.sections():
            if section not in cfg:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in cfg[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                cfg[section][key] = value
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in cfg or key not in cfg[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        cfg[section][key] = value
    return cfg


def echo_config(cfg: dict, out: str) -> None:
    lines = []
    for section in sorted(cfg):
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in sorted(cfg[section].items()))
        lines.append("")
    text = "\n".join(lines)
    with open(os.path.join(out, "effective-config.ini"), "w") as f:
        f.write(text)
    print(text, end="")


class Run:
    """Output directory plus a metrics stream; marks itself incomplete until
    finish() is called."""

    def __init__(self, out: str, cfg: dict):
        self.out = out
        os.makedirs(out, exist_ok=True)
        self._flag = os.path.join(out, "INCOMPLETE")
        with open(self._flag, "w") as f:
            f.write("run in progress or aborted\n")
        echo_config(cfg, out)
        self._metrics = open(os.path.join(out, "metrics.txt"), "w")

    def path(self, name: str) -> str:
        return name if os.path.isabs(name) else os.path.join(self.out, name)

    def metric(self, key: str, value) -> None:
        line = f"{key}={value}"
        print(line)
        self._metrics.write(line + "\n")
        self._metrics.flush()

    def finish(self) -> None:
        self._metrics.close()
        os.remove(self._flag)


def _spec(name: str):
    try:
        return {"easy": easy_spec, "hard": hard_spec, "micro": micro_spec}[name]()
    except KeyError:
        raise ConfigError(f"unknown corpus spec {name!r}") from None


def _build(cfg: dict, seed: int):
    m, s = cfg["model"], cfg["schedule"]
    mc = ModelConfig(seq_len=int(m["seq_len"]), embed_dim=int(m["embed_dim"]),
                     hidden=int(m["hidden"]), blocks=int(m["blocks"]),
                     heads=int(m["heads"]), dropout=float(m["dropout"]),
                     max_steps=int(s["timesteps"]))
    sched = build_schedule(s["kind"], int(s["timesteps"]), s=float(s["s"]))
    return mc, sched


def _corpus(cfg: dict):
    c = cfg["corpus"]
    return generate_corpus(_spec(c["spec"]), int(c["seed"]),
                           (int(c["train_size"]), int(c["dev_size"]),
                            int(c["test_size"])))


def _sample_cfg(cfg: dict, seed_flag: int | None) -> SampleConfig:
    s = cfg["sample"]
    return SampleConfig(clamping=s["clamping"], resample_mode=s["resample_mode"],
                        parametrization=cfg["train"]["parametrization"],
                        seed=int(s["seed"]) if seed_flag is None else seed_flag)


def _load_model(run: Run, cfg: dict):
    state = load_checkpoint(run.path(cfg["paths"]["model"]))
    return state["denoiser"], state["table"], state["schedule"]


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(run: Run, cfg: dict, seed: int | None) -> None:
    c = cfg["corpus"]
    splits = generate_corpus(_spec(c["spec"]),
                             int(c["seed"]) if seed is None else seed,
                             (int(c["train_size"]), int(c["dev_size"]),
                              int(c["test_size"])))
    vocab = splits.corpus.vocab
    vocab.save(run.path("vocab.txt"))
    for name in ("train", "dev", "test"):
        save_records(run.path(f"{name}.txt"), getattr(splits, name), vocab)
    run.metric("vocab_size", len(vocab))
    run.metric("train_size", len(splits.train))


def _train_model(run: Run, cfg: dict, seed: int | None):
    splits = _corpus(cfg)
    t = cfg["train"]
    train_seed = int(t["seed"]) if seed is None else seed
    mc, sched = _build(cfg, train_seed)
    rng = np.random.default_rng(train_seed)
    table = EmbeddingTable(len(splits.corpus.vocab), mc.embed_dim, rng=rng)
    den = Denoiser(mc, rng)
    tc = TrainConfig(iterations=int(t["iterations"]), batch_size=int(t["batch_size"]),
                     lr=float(t["lr"]), weight_decay=float(t["weight_decay"]),
                     lr_decay_iters=(int(t["lr_decay_iters"])
                                     if t["lr_decay_iters"] != "none" else None),
                     rounding_weight=(float(t["rounding_weight"])
                                      if t["rounding_weight"] != "none" else None),
                     seed=train_seed,
                     parametrization=t["parametrization"], objective=t["objective"],
                     eval_every=int(t["eval_every"]))
    tokens = np.stack([r.tokens for r in splits.train])
    stop = float(t["stop_at_accuracy"]) if t["stop_at_accuracy"] != "none" else None
    result = train(tc, tokens, den, table, sched,
                   metrics_sink=lambda m: [run.metric(k, v) for k, v in m.items()],
                   stop_at_accuracy=stop)
    return splits, den, table, sched, result


def cmd_train(run: Run, cfg: dict, seed: int | None) -> None:
    splits, den, table, sched, result = _train_model(run, cfg, seed)
    save_checkpoint(run.path(cfg["paths"]["model"]), den, table, sched,
                    metadata={"corpus_spec": cfg["corpus"]["spec"],
                              "parametrization": cfg["train"]["parametrization"]})
    run.metric("final_rounding_accuracy", f"{result.final_accuracy:.4f}")


def cmd_train_classifier(run: Run, cfg: dict, seed: int | None) -> None:
    den, table, sched = _load_model(run, cfg)
    splits = _corpus(cfg)
    c = cfg["classifier"]
    clf_cfg = ModelConfig(seq_len=den.cfg.seq_len, embed_dim=den.cfg.embed_dim,
                          hidden=int(c["hidden"]), blocks=int(c["blocks"]),
                          heads=int(c["heads"]), max_steps=sched.T, dropout=0.0)
    clf, report = ctl.train_latent_classifier(
        c["kind"], splits.corpus, splits.train, splits.dev, table, sched,
        clf_cfg, iterations=int(c["iterations"]), lr=float(c["lr"]),
        seed=int(c["seed"]) if seed is None else seed)
    label_space = clf.label_space
    if isinstance(label_space, dict):
        label_space = {k: list(v) for k, v in label_space.items()}
    save_params(run.path(cfg["paths"]["classifier"]), clf.params,
                {"kind": c["kind"], "label_space": label_space,
                 "config": {f: getattr(clf_cfg, f)
                            for f in clf_cfg.__dataclass_fields__}})
    for band, acc in enumerate(report.accuracy_by_band):
        run.metric(f"heldout_accuracy_band{band}", f"{acc:.4f}")


def _load_classifier(path) -> ctl.LatentClassifier:
    meta, tensors = load_params(path)
    label_space = meta["label_space"]
    if isinstance(label_space, dict):
        label_space = {k: tuple(v) for k, v in label_space.items()}
    clf = ctl.LatentClassifier(meta["kind"], ModelConfig(**meta["config"]),
                               label_space, np.random.default_rng(0))
    for k, p in clf.params.items():
        p.data = tensors[k]
    return clf


def cmd_sample(run: Run, cfg: dict, seed: int | None) -> None:
    den, table, sched = _load_model(run, cfg)
    splits = _corpus(cfg)
    stride = int(cfg["sample"]["downsample"])
    if stride > 1:
        sched = downsample(sched, stride)
    tokens, _ = generate(den, table, sched, _sample_cfg(cfg, seed),
                         int(cfg["sample"]["k"]))
    nll = [splits.corpus.exact_nll(w) for w in tokens]
    save_samples(run.path("samples.txt"), tokens, splits.corpus.vocab, nll)
    run.metric("lm_score_oracle", f"{lm_score(tokens, splits.corpus):.4f}")


def cmd_eval(run: Run, cfg: dict, seed: int | None) -> None:
    den, table, sched = _load_model(run, cfg)
    splits = _corpus(cfg)
    dev = np.stack([r.tokens for r in splits.dev])
    rng = np.random.default_rng(0 if seed is None else seed)
    bound, se = nll_bound(dev, den, table, sched, rng,
                          parametrization=cfg["train"]["parametrization"])
    run.metric("nll_bound", f"{bound:.4f}")
    run.metric("nll_bound_stderr", f"{se:.4f}")
    run.metric("corpus_entropy", f"{splits.corpus.entropy_estimate(rng, 5000):.4f}")
    run.metric("rounding_accuracy", f"{rounding_accuracy(dev, table, rng):.4f}")


def _run_task(run: Run, cfg: dict, task: ctl.ControlTask, classifiers: dict,
              den, table, sched, corpus: OracleCorpus, seed: int | None):
    co = cfg["control"]
    k = int(co["k"])
    scfg = _sample_cfg(cfg, seed)
    scfg.seed = int(co["seed"]) if seed is None else seed
    if task.kind == "length":
        outs = ctl.length_control(den, table, sched, int(task.payload), scfg, k)
    elif task.kind == "infill":
        left, right = task.payload
        _, outs = ctl.anchor_infill(den, table, sched, left, right, scfg, k,
                                    middle_len=task.middle_len or None)
    else:
        gcfg = ctl.GuidanceConfig(lambda_fluency=float(co["lambda"]),
                                  inner_steps=int(co["inner_steps"]),
                                  adagrad_lr=float(co["adagrad_lr"]))
        stride = int(co["downsample"])
        sched_d = downsample(sched, stride) if stride > 1 else sched
        outs = ctl.guided_generate(den, table, sched_d, task, classifiers,
                                   corpus, scfg, gcfg, k)
    success = control_success(task, outs, corpus)
    nll = lm_score(outs, corpus)
    return outs, success, nll


def cmd_control(run: Run, cfg: dict, seed: int | None) -> None:
    den, table, sched = _load_model(run, cfg)
    splits = _corpus(cfg)
    vocab = splits.corpus.vocab
    tasks_path = run.path(cfg["paths"]["tasks"])
    with open(tasks_path) as f:
        tasks = [ctl.parse_task(line, vocab) for line in f if line.strip()]
    classifiers = {}
    needed = set()
    for task in tasks:
        subs = task.payload if task.kind == "composite" else [task]
        needed.update(t.kind for t in subs
                      if t.kind not in ("length", "infill"))
    if needed:
        clf = _load_classifier(run.path(cfg["paths"]["classifier"]))
        classifiers[clf.kind] = clf
        missing = needed - set(classifiers)
        if missing:
            raise ConfigError(f"no classifier available for kinds {sorted(missing)}")
    successes = []
    with open(run.path("results.txt"), "w") as f:
        for task in tasks:
            outs, success, nll = _run_task(run, cfg, task, classifiers, den,
                                           table, sched, splits.corpus, seed)
            successes.append(success)
            text = " ".join(vocab.words(outs[0][: seq_length(outs[0]) + 1]))
            f.write(f"task={ctl.format_task(task, vocab)}\tsuccess={success:.3f}"
                    f"\toracle_nll={nll:.4f}\ttext={text}\n")
    run.metric("mean_success", f"{float(np.mean(successes)):.4f}")


def cmd_infill(run: Run, cfg: dict, seed: int | None) -> None:
    den, table, sched = _load_model(run, cfg)
    splits = _corpus(cfg)
    vocab = splits.corpus.vocab
    with open(run.path(cfg["paths"]["tasks"])) as f:
        tasks = [ctl.parse_task(line, vocab) for line in f if line.strip()]
    scfg = _sample_cfg(cfg, seed)
    with open(run.path("results.txt"), "w") as f:
        for task in tasks:
            if task.kind != "infill":
                raise ConfigError("infill command handles only infill tasks")
            left, right = task.payload
            best, _ = ctl.anchor_infill(den, table, sched, left, right, scfg,
                                        int(cfg["control"]["k"]),
                                        middle_len=task.middle_len or None)
            nll = splits.corpus.exact_nll(best) / splits.corpus.seq_len
            text = " ".join(vocab.words(best[: seq_length(best) + 1]))
            f.write(f"task={ctl.format_task(task, vocab)}"
                    f"\toracle_nll={nll:.4f}\ttext={text}\n")
            run.metric("oracle_nll", f"{nll:.4f}")


def cmd_gradcheck(run: Run, cfg: dict, seed: int | None) -> None:
    from .objectives import loss_e2e_simple

    rng = np.random.default_rng(int(cfg["gradcheck"]["seed"]) if seed is None else seed)
    sched = build_schedule("sqrt", 8)
    mc = ModelConfig(seq_len=4, embed_dim=3, hidden=8, blocks=1, heads=2,
                     max_steps=8, dropout=0.0)
    den = Denoiser(mc, rng)
    table = EmbeddingTable(6, 3, rng=rng)
    tokens = rng.integers(3, 6, size=(2, 4))

    def loss_fn(*_):
        total, _bd = loss_e2e_simple(tokens, den, table, sched,
                                     np.random.default_rng(7), "x0")
        return total

    params = dict(den.params)
    params["embedding.E"] = table.E
    worst = 0.0
    for name, p in params.items():
        report = ad.gradcheck(loss_fn, [p], tol=1e-4)
        worst = max(worst, report.max_rel_err)
        run.metric(f"rel_err.{name}", f"{report.max_rel_err:.3e}")
    run.metric("max_rel_err", f"{worst:.3e}")
    if worst > 1e-4:
        raise RuntimeError(f"gradient check failed: max rel err {worst:.3e}")


ABLATE_PRESETS = {
    "parametrization": ("x0", "mu", "eps"),
    "lambda": (0.1, 0.01, 0.001, 0.0005),
    "adagrad_lr": (0.05, 0.1, 0.15, 0.2),
    "embeddings": ("learned", "frozen"),
}


def cmd_ablate(run: Run, cfg: dict, seed: int | None, preset: str) -> None:
    if preset not in ABLATE_PRESETS:
        raise ConfigError(f"unknown ablation preset {preset!r};"
                          f" choose from {sorted(ABLATE_PRESETS)}")
    if preset in ("lambda", "adagrad_lr"):
        _ablate_guidance(run, cfg, seed, preset)
    else:
        _ablate_training(run, cfg, seed, preset)


def _short_train(cfg, splits, mc, sched, seed, parametrization, freeze_emb=False):
    rng = np.random.default_rng(seed)
    table = EmbeddingTable(len(splits.corpus.vocab), mc.embed_dim, rng=rng)
    if freeze_emb:
        table.E.requires_grad = False
    den = Denoiser(mc, rng)
    tokens = np.stack([r.tokens for r in splits.train])
    tc = TrainConfig(iterations=int(cfg["ablate"]["iterations"]), seed=seed,
                     parametrization=parametrization, eval_every=10**9)
    train(tc, tokens, den, table, sched)
    return den, table


def _ablate_training(run: Run, cfg: dict, seed: int | None, preset: str) -> None:
    base_seed = 0 if seed is None else seed
    splits = _corpus(cfg)
    k = int(cfg["ablate"]["samples"])
    dims = [int(d) for d in cfg["ablate"]["dims"].split(",")]
    sched = build_schedule(cfg["schedule"]["kind"], int(cfg["schedule"]["timesteps"]))
    for d in dims:
        mc = ModelConfig(seq_len=splits.corpus.seq_len, embed_dim=d,
                         hidden=int(cfg["model"]["hidden"]),
                         blocks=int(cfg["model"]["blocks"]),
                         heads=int(cfg["model"]["heads"]),
                         max_steps=sched.T)
        for variant in ABLATE_PRESETS[preset]:
            if preset == "parametrization":
                den, table = _short_train(cfg, splits, mc, sched, base_seed, variant)
                scfg = SampleConfig(parametrization=variant, seed=base_seed)
            else:
                den, table = _short_train(cfg, splits, mc, sched, base_seed,
                                          "x0", freeze_emb=(variant == "frozen"))
                scfg = SampleConfig(parametrization="x0", seed=base_seed)
            tokens, _ = generate(den, table, downsample(sched, 10), scfg, k)
            score = lm_score(tokens, splits.corpus)
            run.metric(f"lm_score.d{d}.{variant}", f"{score:.4f}")


def _ablate_guidance(run: Run, cfg: dict, seed: int | None, preset: str) -> None:
    den, table, sched = _load_model(run, cfg)
    splits = _corpus(cfg)
    clf = _load_classifier(run.path(cfg["paths"]["classifier"]))
    field_name = next(iter(ctl.label_space_for("semantic_content", splits.corpus)))
    value = splits.corpus.spec.fields[0].values[0]
    task = ctl.ControlTask("semantic_content", (field_name, value))
    co = cfg["control"]
    stride = int(co["downsample"])
    sched_d = downsample(sched, stride) if stride > 1 else sched
    for v in ABLATE_PRESETS[preset]:
        lam = v if preset == "lambda" else float(co["lambda"])
        lr = v if preset == "adagrad_lr" else float(co["adagrad_lr"])
        gcfg = ctl.GuidanceConfig(lambda_fluency=lam, inner_steps=int(co["inner_steps"]),
                                  adagrad_lr=lr)
        outs = ctl.guided_generate(den, table, sched_d, task, {clf.kind: clf},
                                   splits.corpus, _sample_cfg(cfg, seed), gcfg,
                                   int(co["k"]))
        run.metric(f"success.{preset}.{v}",
                   f"{control_success(task, outs, splits.corpus):.4f}")
        run.metric(f"lm_score.{preset}.{v}",
                   f"{lm_score(outs, splits.corpus):.4f}")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "train-classifier": cmd_train_classifier,
    "sample": cmd_sample,
    "control": cmd_control,
    "infill": cmd_infill,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="textdiffusion",
        description="diffusion language model experiments")
    parser.add_argument("command", choices=list(COMMANDS) + ["ablate"])
    parser.add_argument("preset", nargs="?", default=None,
                        help="ablation preset (ablate command only)")
    parser.add_argument("--config", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default="runs/latest")
    parser.add_argument("--override", action="append", default=[],
                        metavar="SECTION.KEY=VALUE")
    parser.add_argument("--precision", choices=("32", "64"), default="64")
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        cfg = load_config(args.config, args.override)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    ad.set_default_dtype(np.float32 if args.precision == "32" else np.float64)
    try:
        run = Run(args.out, cfg)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        if args.command == "ablate":
            if args.preset is None:
                raise ConfigError("ablate needs a preset argument")
            cmd_ablate(run, cfg, args.seed, args.preset)
        else:
            COMMANDS[args.command](run, cfg, args.seed)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    run.finish()
    return 0


if __name__ == "__main__":
    sys.exit(main())
