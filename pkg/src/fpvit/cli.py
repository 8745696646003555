"""``fpvit`` command line: generate, train, embed, search, authenticate, identify, bench, saliency.

Options resolve in order: command-line flag, then the config file, then the
built-in default.  The config file is flat ``key = value`` text split into
sections; a key is looked up in the section named after the command first
and then in the option's home section (``model``, ``schedule``, ``protocol``
or ``run``).

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numerical or training failure.  Failures print one JSON line on
stderr.
"""

from __future__ import annotations

import argparse
import configparser
import json
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as ev
from .errors import ConfigError, FormatError, FpvitError, ValidationError
from .matcher import EmbeddingStore, bench_throughput, fuse_scores, search
from .minutiae import MinutiaeSet, read_minutiae_file, read_pgm, write_pgm
from .pipeline import MODES, default_sigma, embed_corpus, load_corpus, make_tokens, train_on
from .synthdata import corpus_checksum, generate_dataset
from .vit import Schedule, load_checkpoint, saliency, save_checkpoint


class _Opt:
    """One resolvable option: flag spelling, home section, parser, default."""

    def __init__(self, flag, section, kind, default, help_text, choices=None):
        self.flag, self.section, self.kind = flag, section, kind
        self.default, self.help, self.choices = default, help_text, choices

    @property
    def dest(self):
        return self.flag.lstrip("-").replace("-", "_")


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _id_range(text):
    """``"0-49"`` or ``"3,5,9"`` or a mix such as ``"0-9,20"``."""
    out = []
    for part in str(text).split(","):
        lo, _, hi = part.strip().partition("-")
        if lo:
            out += list(range(int(lo), int(hi or lo) + 1))
    return out


MODEL = [
    _Opt("--image-side", "model", int, 64, "input side after resizing"),
    _Opt("--patch-size", "model", int, 8, "square patch side"),
    _Opt("--width", "model", int, 64, "transformer width"),
    _Opt("--depth", "model", int, 2, "number of encoder blocks"),
    _Opt("--heads", "model", int, 4, "attention heads"),
    _Opt("--mlp-ratio", "model", float, 4.0, "MLP hidden width / width"),
    _Opt("--embedding-dim", "model", int, 32, "embedding length"),
    _Opt("--sigma", "model", float, None, "minutiae hot-spot spread in px (default scales with image side)"),
]
SCHEDULE = [
    _Opt("--epochs", "schedule", int, 40, "training epochs"),
    _Opt("--batch-size", "schedule", int, 32, "mini-batch size"),
    _Opt("--lr", "schedule", float, 1e-3, "peak learning rate"),
    _Opt("--min-lr", "schedule", float, 0.0, "final learning rate"),
    _Opt("--warmup", "schedule", int, 30, "linear warmup steps"),
    _Opt("--weight-decay", "schedule", float, 0.05, "decoupled weight decay"),
]
SEED = _Opt("--seed", "run", int, 0, "random seed")
THREADS = _Opt("--threads", "run", int, 1, "worker threads for matching")

COMMANDS: dict[str, list[_Opt]] = {
    "generate": [
        _Opt("--identities", "data", int, 80, "number of identities"),
        _Opt("--impressions", "data", int, 10, "impressions per identity"),
        _Opt("--first-id", "data", int, 0, "first identity number"),
        SEED,
        _Opt("--out", "run", str, None, "output corpus directory"),
    ],
    "train": [
        _Opt("--corpus", "data", str, None, "corpus directory"),
        _Opt("--mode", "model", str, "concat", "token layout", choices=MODES),
        _Opt("--ids", "data", _id_range, None, "training identities, e.g. 0-49 (default: all)"),
        _Opt("--val-ids", "data", _id_range, None, "validation identities for per-epoch rank-1"),
        _Opt("--init-from", "run", str, None, "warm-start checkpoint (pretrain then fine-tune)"),
        *MODEL, *SCHEDULE, SEED,
        _Opt("--out", "run", str, None, "output directory"),
    ],
    "embed": [
        _Opt("--model", "run", str, None, "checkpoint"),
        _Opt("--corpus", "data", str, None, "corpus directory"),
        _Opt("--ids", "data", _id_range, None, "identities to embed (default: all)"),
        _Opt("--out", "run", str, None, "output directory"),
    ],
    "search": [
        _Opt("--gallery", "run", str, None, "gallery embedding store"),
        _Opt("--probes", "run", str, None, "probe embedding store"),
        _Opt("--top-k", "run", int, 10, "results per probe"),
        _Opt("--dim", "run", int, None, "expected embedding dimension"),
        THREADS,
        _Opt("--out", "run", str, None, "output directory"),
    ],
    "authenticate": [
        _Opt("--embeddings", "run", str, None, "comma list of name=store entries"),
        _Opt("--far", "protocol", _floats, [0.001], "FAR targets"),
        _Opt("--fuse", "protocol", _floats, None, "fusion weights w1,w2 over the first two stores"),
        _Opt("--normalize", "protocol", int, 0, "min-max normalise scores before fusion (0/1)"),
        _Opt("--out", "run", str, None, "output directory"),
    ],
    "identify": [
        _Opt("--gallery", "run", str, None, "gallery embedding store"),
        _Opt("--probes", "run", str, None, "probe embedding store"),
        _Opt("--embeddings", "run", str, None, "single store split into gallery and probes"),
        _Opt("--distractors", "run", str, None, "extra gallery-only store"),
        _Opt("--enroll", "protocol", int, 2, "enrollments per finger when splitting"),
        _Opt("--unmated-fraction", "protocol", float, 0.5, "open-set share of unmated subjects"),
        _Opt("--max-rank", "protocol", int, None, "CMC length"),
        _Opt("--thresholds", "protocol", _floats, None, "open-set thresholds (default: 101 points over [-1, 1])"),
        SEED, THREADS,
        _Opt("--out", "run", str, None, "output directory"),
    ],
    "bench": [
        _Opt("--dim", "run", int, 384, "embedding dimension"),
        _Opt("--gallery-size", "run", int, 1_000_000, "gallery records"),
        _Opt("--repetitions", "run", int, 5, "probes timed"),
        _Opt("--top-k", "run", int, 10, "results per probe"),
        _Opt("--threads", "run", int, None, "threads for the multi-threaded run (default: all cores)"),
        SEED,
        _Opt("--out", "run", str, None, "output directory"),
    ],
    "saliency": [
        _Opt("--model", "run", str, None, "checkpoint"),
        _Opt("--image", "data", str, None, "PGM image"),
        _Opt("--minutiae", "data", str, None, "MNT minutiae file (concat models)"),
        _Opt("--target", "run", str, "embedding-norm", "embedding-norm or a class index"),
        _Opt("--out", "run", str, None, "output directory"),
    ],
}
REQUIRED = {
    "generate": ["out"], "train": ["corpus", "out"], "embed": ["model", "corpus", "out"],
    "search": ["gallery", "probes", "out"], "authenticate": ["embeddings", "out"], "identify": ["out"],
    "bench": ["out"], "saliency": ["model", "image", "out"],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fpvit", description="Minutiae-guided ViT fingerprint toolkit.")
    p.add_argument("--version", action="version", version=f"fpvit {__version__}")
    p.add_argument("--config", help="sectioned key = value config file")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in COMMANDS.items():
        sp = sub.add_parser(name, help=f"{name} command")
        for o in opts:
            # raw strings so config values and flags share one conversion path
            sp.add_argument(o.flag, dest=o.dest, default=None, help=o.help, metavar=o.dest.upper())
        if name == "identify":
            g = sp.add_mutually_exclusive_group(required=True)
            g.add_argument("--closed", action="store_true", help="closed-set CMC")
            g.add_argument("--open", action="store_true", help="open-set FPIR/FNIR")
    return p


def _read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                cp.read_file(f)
        except OSError as e:
            raise ConfigError(f"{path}: cannot read config: {e}") from e
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from e
    return cp


def resolve(command: str, args: argparse.Namespace, cp: configparser.ConfigParser) -> dict:
    """Merge flags, config file and defaults into one typed dict."""
    out = {}
    for o in COMMANDS[command]:
        raw = getattr(args, o.dest)
        if raw is None:
            for section in (command, o.section):
                for key in (o.dest, o.dest.replace("_", "-")):
                    if cp.has_option(section, key):
                        raw = cp.get(section, key)
                        break
                if raw is not None:
                    break
        if raw is None:
            out[o.dest] = o.default
            continue
        try:
            val = o.kind(raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{o.flag}: cannot parse {raw!r}: {e}") from e
        if o.choices and val not in o.choices:
            raise ConfigError(f"{o.flag} must be one of {list(o.choices)}, got {val!r}")
        out[o.dest] = val
    missing = [k for k in REQUIRED[command] if out.get(k) in (None, "")]
    if missing:
        raise ConfigError(f"{command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return out


# ----------------------------------------------------------------- provenance


def _versions() -> dict:
    return {"fpvit": __version__, "numpy": np.__version__, "python": platform.python_version(),
            "platform": platform.platform()}


def write_provenance(out_dir: Path, command: str, cfg: dict, started: float, extra: dict | None = None,
                     name: str = "provenance.json") -> None:
    block = {
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg,
        "seed": cfg.get("seed"),
        "versions": _versions(),
        "elapsed_seconds": round(time.perf_counter() - started, 3),
    }
    if extra:
        block.update(extra)
    (out_dir / name).write_text(json.dumps(block, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_store(path, dim=None) -> EmbeddingStore:
    if not Path(path).is_file():
        raise FormatError(f"{path}: no such embedding store")
    return EmbeddingStore.read(path, expect_dim=dim)


# ------------------------------------------------------------------- commands


def cmd_generate(cfg: dict, out: Path) -> dict:
    rows = generate_dataset(cfg["identities"], cfg["impressions"], cfg["seed"], out, first_id=cfg["first_id"])
    digest = corpus_checksum(out)
    print(f"wrote {len(rows)} impressions to {out}  sha256={digest}")
    return {"checksum": digest, "records": len(rows)}


def cmd_train(cfg: dict, out: Path) -> dict:
    corpus = load_corpus(cfg["corpus"])
    train_set = corpus.subset(cfg["ids"]) if cfg["ids"] else corpus
    if len(train_set) == 0:
        raise ValidationError("no training impressions selected")
    val = corpus.subset(cfg["val_ids"]) if cfg["val_ids"] else None
    side = cfg["image_side"]
    sigma = cfg["sigma"] if cfg["sigma"] is not None else default_sigma(side)
    kw = dict(image_side=side, patch_size=cfg["patch_size"], embed_width=cfg["width"], depth=cfg["depth"],
              heads=cfg["heads"], mlp_ratio=cfg["mlp_ratio"], embedding_dim=cfg["embedding_dim"],
              seed=cfg["seed"])
    sched = Schedule(epochs=cfg["epochs"], batch_size=cfg["batch_size"], peak_lr=cfg["lr"], min_lr=cfg["min_lr"],
                     warmup_steps=cfg["warmup"], weight_decay=cfg["weight_decay"], seed=cfg["seed"])
    init = None
    if cfg["init_from"]:
        init, _, header = load_checkpoint(cfg["init_from"])
        if header.get("extra", {}).get("mode", cfg["mode"]) != cfg["mode"]:
            raise ConfigError(f"--init-from checkpoint was trained with mode {header['extra']['mode']!r}")

    def log_fn(e):
        msg = f"epoch {e['epoch'] + 1}/{sched.epochs} loss {e['loss']:.4f} acc {e['train_acc']:.3f}"
        if "val_rank1" in e:
            msg += f" val_rank1 {e['val_rank1']:.3f}"
        print(msg, flush=True)

    params, mcfg, log = train_on(train_set, cfg["mode"], kw, sched, val=val, sigma=sigma, init=init, log_fn=log_fn)
    save_checkpoint(out / "model.fpvt", params, mcfg, {"mode": cfg["mode"], "sigma": sigma})
    (out / "train_log.json").write_text(json.dumps(log.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(f"checkpoint written to {out / 'model.fpvt'}")
    return {"model_config": asdict(mcfg), "schedule": asdict(sched), "final": log.epochs[-1]}


def _model_mode(header) -> tuple[str, float | None]:
    extra = header.get("extra", {})
    return extra.get("mode", "concat"), extra.get("sigma")


def cmd_embed(cfg: dict, out: Path) -> dict:
    params, mcfg, header = load_checkpoint(cfg["model"])
    mode, sigma = _model_mode(header)
    corpus = load_corpus(cfg["corpus"])
    if cfg["ids"]:
        corpus = corpus.subset(cfg["ids"])
    if len(corpus) == 0:
        raise ValidationError("no impressions selected")
    emb = embed_corpus(params, mcfg, corpus, mode, sigma)
    store = EmbeddingStore.from_arrays(corpus.subjects, corpus.impressions, emb)
    store.write(out / "embeddings.fpem")
    print(f"{len(store)} embeddings of dim {store.dim} written to {out / 'embeddings.fpem'}")
    return {"records": len(store), "dim": store.dim, "mode": mode}


def cmd_search(cfg: dict, out: Path) -> dict:
    gallery = _load_store(cfg["gallery"], cfg["dim"])
    probes = _load_store(cfg["probes"], gallery.dim)
    rows = ["probe_subject,probe_impression,rank,subject,impression,score"]
    for s, i, v in zip(probes.subjects, probes.impressions, probes.vectors):
        for r, m in enumerate(search(gallery, v, cfg["top_k"], threads=cfg["threads"]), 1):
            rows.append(f"{s},{i},{r},{m.subject_id},{m.impression_id},{m.score!r}")
    (out / "matches.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"{len(probes)} probes searched; results in {out / 'matches.csv'}")
    return {"probes": len(probes), "gallery": len(gallery)}


def _named_stores(spec: str) -> list[tuple[str, EmbeddingStore]]:
    out = []
    for k, part in enumerate(p for p in spec.split(",") if p.strip()):
        name, path = part.split("=", 1) if "=" in part else (f"model{k + 1}", part)
        out.append((name.strip(), _load_store(path.strip())))
    if not out:
        raise ConfigError("--embeddings lists no stores")
    return out


def _aligned_scores(store: EmbeddingStore, keys: list[tuple[int, int]]) -> np.ndarray:
    index = {k: n for n, k in enumerate(zip(store.subjects.tolist(), store.impressions.tolist()))}
    try:
        rows = [index[k] for k in keys]
    except KeyError as e:
        raise ValidationError(f"record {e.args[0]} missing from one of the stores") from e
    v = store.vectors[rows]
    return v @ v.T


def cmd_authenticate(cfg: dict, out: Path) -> dict:
    stores = _named_stores(cfg["embeddings"])
    first = stores[0][1]
    keys = list(zip(first.subjects.tolist(), first.impressions.tolist()))
    labels = np.array([k[0] for k in keys])
    gen, imp = ev.enumerate_pairs(labels)
    mats = [(name, _aligned_scores(s, keys)) for name, s in stores]
    if cfg["fuse"] is not None:
        if len(cfg["fuse"]) != 2 or len(mats) < 2:
            raise ConfigError("--fuse needs two weights and at least two stores")
        w1, w2 = cfg["fuse"]
        mats.append(("fused", fuse_scores(mats[0][1], mats[1][1], w1, w2, normalize=bool(cfg["normalize"]))))
    report = {}
    lines = ["model," + ",".join(f"TAR@{t:g}FAR" for t in cfg["far"])]
    for name, S in mats:
        sc = ev.ScoreSet(S[gen[:, 0], gen[:, 1]], S[imp[:, 0], imp[:, 1]])
        pts = ev.tar_at_far(sc, cfg["far"])
        report[name] = [asdict(p) for p in pts]
        lines.append(name + "," + ",".join(f"{p.tar:.6f}" for p in pts))
        ev.write_tar_csv(pts, out / f"tar_{name}.csv")
    (out / "authentication.json").write_text(
        json.dumps({"genuine_pairs": len(gen), "imposter_pairs": len(imp), "models": report}, indent=2) + "\n",
        encoding="utf-8",
    )
    (out / "tar_table.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return {"genuine_pairs": len(gen), "imposter_pairs": len(imp)}


def _split_store(cfg) -> tuple[EmbeddingStore, EmbeddingStore, EmbeddingStore | None]:
    """Gallery, probes and (for open set) the open gallery from one store."""
    store = _load_store(cfg["embeddings"])
    dist = _load_store(cfg["distractors"], store.dim) if cfg["distractors"] else None
    by_subject: dict[int, list[int]] = {}
    for s, i in sorted(zip(store.subjects.tolist(), store.impressions.tolist())):
        by_subject.setdefault(s, []).append(i)
    dmap: dict[int, list[int]] = {}
    if dist is not None:
        for s, i in sorted(zip(dist.subjects.tolist(), dist.impressions.tolist())):
            dmap.setdefault(s, []).append(i)
    proto = ev.Protocol(enroll_impressions_per_finger=cfg["enroll"], unmated_fraction=cfg["unmated_fraction"])
    g = ev.build_galleries(by_subject, dmap, proto, seed=cfg["seed"])

    def gather(keys):
        rows_s, rows_i, vecs = [], [], []
        for src in (store, dist):
            if src is None:
                continue
            idx = {k: n for n, k in enumerate(zip(src.subjects.tolist(), src.impressions.tolist()))}
            for k in keys:
                if k in idx:
                    rows_s.append(k[0]), rows_i.append(k[1]), vecs.append(src.vectors[idx[k]])
        return EmbeddingStore.from_arrays(rows_s, rows_i, np.array(vecs, np.float32).reshape(-1, store.dim),
                                          check_norm=False)

    return gather(g.closed_gallery), gather(g.probes), gather(g.open_gallery)


def cmd_identify(cfg: dict, out: Path, closed: bool) -> dict:
    if cfg["embeddings"]:
        gallery, probes, open_gallery = _split_store(cfg)
        if not closed:
            gallery = open_gallery
    elif cfg["gallery"] and cfg["probes"]:
        gallery = _load_store(cfg["gallery"])
        probes = _load_store(cfg["probes"], gallery.dim)
    else:
        raise ConfigError("identify needs --embeddings, or both --gallery and --probes")
    if closed:
        cmc = ev.closed_set_search_eval(gallery, probes.vectors, probes.subjects, cfg["max_rank"])
        ev.write_cmc_csv(cmc, out / "cmc.csv")
        print(f"rank-1 {cmc[0].hit_rate:.4f} over {len(probes)} probes, gallery {len(gallery)}; CMC in {out / 'cmc.csv'}")
        return {"rank1": cmc[0].hit_rate, "gallery_size": len(gallery), "probes": len(probes)}
    enrolled = set(gallery.subjects.tolist())
    mated = np.array([s in enrolled for s in probes.subjects.tolist()], dtype=bool)
    thresholds = cfg["thresholds"] or np.linspace(-1.0, 1.0, 101).tolist()
    det = ev.open_set_search_eval(
        gallery, probes.vectors[mated], probes.subjects[mated], probes.vectors[~mated], probes.subjects[~mated],
        thresholds,
    )
    ev.write_det_csv(det, out / "det.csv")
    print(f"{int(mated.sum())} mated / {int((~mated).sum())} unmated probes, gallery {len(gallery)}; "
          f"FPIR/FNIR in {out / 'det.csv'}")
    return {"gallery_size": len(gallery), "mated": int(mated.sum()), "unmated": int((~mated).sum())}


def cmd_bench(cfg: dict, out: Path) -> dict:
    rep = bench_throughput(cfg["dim"], cfg["gallery_size"], cfg["repetitions"], cfg["top_k"], cfg["threads"],
                           cfg["seed"])
    (out / "bench.json").write_text(json.dumps(rep, indent=2) + "\n", encoding="utf-8")
    print(
        f"single-thread {rep['single_thread']['mean_cps'] / 1e6:.2f}M comparisons/s, "
        f"{rep['multi_thread']['threads']} threads {rep['multi_thread']['mean_cps'] / 1e6:.2f}M/s "
        f"(reference 2.5M/s: {'met' if rep['meets_reference'] else 'not met'}) on {rep['hardware']}"
    )
    return {"meets_reference": rep["meets_reference"]}


def cmd_saliency(cfg: dict, out: Path) -> dict:
    params, mcfg, header = load_checkpoint(cfg["model"])
    mode, sigma = _model_mode(header)
    img = read_pgm(cfg["image"])
    h, w = img.shape
    if cfg["minutiae"]:
        mset = read_minutiae_file(cfg["minutiae"])
    elif mode == "concat":
        raise ConfigError("concat model needs --minutiae")
    else:
        mset = MinutiaeSet(w, h)
    target = cfg["target"]
    if target != "embedding-norm":
        try:
            target = int(target)
        except ValueError as e:
            raise ConfigError(f"--target must be embedding-norm or a class index, got {target!r}") from e
        if not 0 <= target < mcfg.num_classes:
            raise ConfigError(f"--target class {target} outside [0, {mcfg.num_classes})")
    tokens = make_tokens(img, mset, mode, mcfg.image_side, mcfg.patch_size, sigma)
    sal = saliency(params, tokens, mcfg, target)
    write_pgm(sal, out / "saliency.pgm")
    print(f"saliency map ({mcfg.image_side}x{mcfg.image_side}) written to {out / 'saliency.pgm'}")
    return {"target": target}


# ----------------------------------------------------------------------- main


def _fail(err: Exception, code: int) -> int:
    line = {"error": type(err).__name__, "exit_code": code, "message": str(err)}
    print(json.dumps(line), file=sys.stderr)
    return code


def run(argv=None) -> int:
    started = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args.command, args, _read_config(args.config))
        out = _out_dir(cfg["out"])
        if args.command == "identify":
            extra = cmd_identify(cfg, out, closed=args.closed)
            cfg["closed"] = bool(args.closed)
        else:
            extra = globals()[f"cmd_{args.command}"](cfg, out)
        write_provenance(out, args.command, cfg, started, {"result": extra})
        return 0
    except FpvitError as e:
        return _fail(e, e.exit_code)
    except (OSError, ValueError) as e:
        return _fail(e, 2)
    except ArithmeticError as e:
        return _fail(e, 3)
    except SystemExit as e:  # --help and --version
        return int(e.code or 0)


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
