"""Command-line front end: ``clipfree <command> [flags]``.

Commands: ``synth``, ``train``, ``quantize``, ``cfqp``, ``sweep``, ``bench``
and ``eval``.  Every command also accepts ``--config file.json`` whose keys
are flag names (``patches_per_epoch`` or ``patches-per-epoch``); flags given
on the command line win over the file.

Exit codes: 0 success, 2 usage or input error, 3 calibration coverage error,
4 contract violation (e.g. a clipped model where a no-clip one is required),
1 anything else (e.g. diverged training).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__, data, metrics, quant, ri, train, zoo
from .errors import CalibrationError, ContractError, FormatError, StructuralError

log = logging.getLogger("clipfree")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CALIBRATION, EXIT_CONTRACT = 0, 1, 2, 3, 4
CSV_HEADER = ("model", "clipped", "ri_id", "method", "on_before", "on_after", "psnr_mean",
              "ssim_mean", "ms_per_inference")
SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


# -- sweep ------------------------------------------------------------------------

@dataclass
class ExperimentRecord:
    """One (model, RI) quantization and its evaluation.

    ``raw_psnr_mean`` is the score of the unaugmented grayscale RI and is the
    sort key of a sweep; ``verdict`` is the good/bad judgement of that RI.
    Neither is part of the CSV.
    """

    model: str
    clipped: bool
    ri_id: str
    method: str
    on_before: int | None
    on_after: int | None
    psnr_mean: float
    ssim_mean: float
    ms_per_inference: float
    raw_psnr_mean: float = 0.0
    verdict: str = ""

    def csv_row(self) -> list:
        on = lambda v: "" if v is None else v
        return [self.model, int(self.clipped), self.ri_id, self.method, on(self.on_before),
                on(self.on_after), f"{self.psnr_mean:.4f}", f"{self.ssim_mean:.6f}",
                f"{self.ms_per_inference:.3f}"]


def _quantized_score(m, ri_img, testset, ri_id, timing=True):
    q = quant.quantize_model(m, quant.calibrate(m, [ri_img]))
    times = []

    def run(lr):
        t0 = time.perf_counter()
        out = quant.int8_forward(q, lr)
        times.append(time.perf_counter() - t0)
        return out

    res = metrics.eval_model(run, testset, scale=m.scale, ri_id=ri_id, model_id=m.name)
    ms = 1000.0 * float(np.mean(times)) if timing else 0.0
    return res.mean_psnr, res.mean_ssim, ms


def sweep_one(m: zoo.ModelGraph, image_id: str, img, testset, mode: str,
              thr: ri.Thresholds, timing: bool = True) -> ExperimentRecord:
    gray = ri.to_grayscale_ri(img)
    on = verdict = None
    if not m.clipped:
        rep = ri.outlier_stats(m, gray, thr)
        on, verdict = rep.outlier_count, rep.verdict
    raw = _quantized_score(m, gray, testset, image_id, timing)
    if mode == "raw":
        return ExperimentRecord(m.name, m.clipped, image_id, ri.NONE, on, on, *raw,
                                raw_psnr_mean=raw[0], verdict=verdict or "")
    res = ri.cfqp(m, img, thr)
    if res.method == ri.NONE:
        score = raw
    else:
        score = _quantized_score(m, res.image, testset, image_id, timing)
    return ExperimentRecord(m.name, m.clipped, image_id, res.method, res.original_outlier_count,
                            res.outlier_count, *score, raw_psnr_mean=raw[0], verdict=verdict)


_WORKER = {}


def _init_worker(m, testset, mode, thr, timing):
    _WORKER.update(m=m, testset=testset, mode=mode, thr=thr, timing=timing)


def _work(item):
    w = _WORKER
    return sweep_one(w["m"], item[0], item[1], w["testset"], w["mode"], w["thr"], w["timing"])


def sweep_records(m: zoo.ModelGraph, corpus: data.Corpus, testset: data.Corpus, mode: str = "raw",
                  thr: ri.Thresholds | None = None, jobs: int = 1, timing: bool = True) -> list:
    """Quantize ``m`` once per corpus image and evaluate each INT8 model on ``testset``.

    Rows come back sorted by ``raw_psnr_mean`` ascending, ties in corpus
    order, independent of ``jobs``.
    """
    if mode not in ("raw", "cfqp"):
        raise StructuralError(f"unknown sweep mode {mode!r}; expected 'raw' or 'cfqp'")
    if len(corpus) == 0:
        raise StructuralError("corpus is empty")
    if mode == "cfqp" and m.clipped:
        raise ContractError(f"model {m.name!r} is clipped; cfqp sweeps need the no-clip variant")
    thr = thr or ri.Thresholds()
    items = list(corpus.images)
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker,
                                 initargs=(m, testset, mode, thr, timing)) as pool:
            recs = list(pool.map(_work, items))
    else:
        recs = [sweep_one(m, i, img, testset, mode, thr, timing) for i, img in items]
    order = sorted(range(len(recs)), key=lambda k: (recs[k].raw_psnr_mean, k))
    return [recs[k] for k in order]


def write_sweep_csv(records, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(r.csv_row())
    zoo.atomic_write(Path(path), buf.getvalue().encode())


# -- bench ------------------------------------------------------------------------

def bench(m: zoo.ModelGraph, height: int, width: int, repeats: int, ri_img=None, seed: int = 0) -> dict:
    """Interleaved wall-clock comparison of the clipped and no-clip INT8 forwards.

    Both variants share ``m``'s weights and are calibrated on ``ri_img``
    (default: a seeded synthetic image of the benchmark size).  Each repeat
    times both variants back to back, alternating which goes first.
    """
    if repeats < 1:
        raise StructuralError(f"repeats must be >= 1, got {repeats}")
    rng = np.random.Generator(np.random.PCG64(seed))
    x = data.synth_image(rng, max(height, width))[:height, :width]
    if ri_img is None:
        ri_img = x
    variants = {}
    for name, clipped in (("noclip", False), ("clipped", True)):
        mv = zoo.with_clip(m, clipped)
        variants[name] = quant.quantize_model(mv, quant.calibrate(mv, [ri_img]))
    samples = {k: [] for k in variants}
    for k in variants:  # warm-up
        quant.int8_forward(variants[k], x)
    for r in range(repeats):
        order = ("noclip", "clipped") if r % 2 == 0 else ("clipped", "noclip")
        for k in order:
            t0 = time.perf_counter()
            quant.int8_forward(variants[k], x)
            samples[k].append(1000.0 * (time.perf_counter() - t0))
    out = {"schema_version": SCHEMA_VERSION, "model": m.name, "input_size": [height, width],
           "repeats": repeats, "variants": {}}
    for k, qm in variants.items():
        s = samples[k]
        out["variants"][k] = {"elementwise_ops": quant.elementwise_ops(qm.source, height, width),
                              "mean_ms": float(np.mean(s)), "min_ms": float(np.min(s)),
                              "samples_ms": s}
    out["mean_ratio_noclip_over_clipped"] = out["variants"]["noclip"]["mean_ms"] / \
        out["variants"]["clipped"]["mean_ms"]
    return out


# -- commands ---------------------------------------------------------------------

def _need(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s): "
                         + ", ".join("--" + n.replace("_", "-") for n in missing))


def _existing(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        zoo.atomic_write(Path(path), text.encode())


def _load_model(path):
    """A float model or a quantized one, depending on the manifest format."""
    p = _existing(path, "model")
    if zoo.read_manifest(p).get("format") == "clipfree-quantized":
        return quant.load_quantized(p)
    return zoo.load_model(p)


def _load_float(path) -> zoo.ModelGraph:
    m = _load_model(path)
    if isinstance(m, quant.QuantizedModel):
        raise UsageError(f"{path}: expected a float model, got a quantized one")
    return m


def _thresholds(path) -> ri.Thresholds:
    if not path:
        return ri.Thresholds()
    try:
        return ri.Thresholds.from_json(json.loads(_existing(path, "thresholds file").read_text()))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed thresholds JSON: {exc}") from None


def cmd_synth(args) -> int:
    _need(args, "out")
    corpus = data.synth_corpus(args.seed, args.n, args.size, name=args.name)
    data.write_corpus_manifest(corpus, args.out, args.images_dir)
    print(f"wrote {len(corpus)} images to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    _need(args, "arch", "corpus", "out")
    corpus = data.load_corpus(_existing(args.corpus, "corpus"))
    cfg = train.TrainConfig(epochs=args.epochs, seed=args.seed, patches_per_epoch=args.patches_per_epoch,
                            loss=args.loss)
    m = zoo.build_model(args.arch, args.clipped, args.seed)
    out = Path(args.out)
    trained = train.train(m, cfg, corpus.tensors(), log_path=args.log or out.with_suffix(".log.jsonl"))
    zoo.save_model(trained, out)
    h = trained.meta["history"]
    print(f"{m.name} clipped={m.clipped}: held-out loss {h[0]['heldout_loss']:.3f} -> "
          f"{h[-1]['heldout_loss']:.3f}; wrote {out}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    _need(args, "model", "out")
    m = _load_float(args.model)
    if args.calibration:
        try:
            cal = quant.CalibrationRecord.from_json(
                json.loads(_existing(args.calibration, "calibration record").read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{args.calibration}: malformed calibration JSON: {exc}") from None
    else:
        _need(args, "ri")
        img = data.load_image(_existing(args.ri, "representative image"))
        if args.grayscale:
            img = ri.to_grayscale_ri(img)
        cal = quant.calibrate(m, [img])
    qm = quant.quantize_model(m, cal, bits=args.bits)
    out = Path(args.out)
    quant.save_quantized(qm, out)
    _write_json(cal.to_json(), out.with_suffix(".calibration.json"))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_cfqp(args) -> int:
    _need(args, "model", "image", "out")
    m = _load_float(args.model)
    thr = _thresholds(args.thresholds_json)
    img = data.load_image(_existing(args.image, "image"))
    res = ri.cfqp(m, img, thr)
    out = Path(args.out)
    data.save_image(res.image, out)
    sidecar = out.with_suffix(out.suffix + ".json")
    zoo.atomic_write(sidecar, ri.provenance_sidecar(res, thr, source=str(args.image)).encode())
    print(json.dumps(res.to_json()))
    return EXIT_OK


def cmd_sweep(args) -> int:
    _need(args, "model", "corpus", "testset", "out")
    m = _load_float(args.model)
    corpus = data.load_corpus(_existing(args.corpus, "corpus"))
    testset = data.load_corpus(_existing(args.testset, "test set"))
    thr = _thresholds(args.thresholds_json)
    recs = sweep_records(m, corpus, testset, args.mode, thr, jobs=args.jobs, timing=not args.no_timing)
    write_sweep_csv(recs, args.out)
    meta = {"schema_version": SCHEMA_VERSION, "columns": list(CSV_HEADER), "mode": args.mode,
            "model": str(args.model), "corpus": corpus.name, "testset": testset.name,
            "rows": len(recs), "sorted_by": "raw_psnr_mean ascending, ties in corpus order",
            "thresholds": asdict(thr), "version": __version__}
    _write_json(meta, Path(args.out).with_suffix(".meta.json"))
    print(f"wrote {len(recs)} rows to {args.out}")
    return EXIT_OK


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--input-size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise UsageError(f"--input-size must be positive, got {text!r}")
    return h, w


def cmd_bench(args) -> int:
    _need(args, "model")
    m = _load_float(args.model)
    h, w = _size(args.input_size)
    ri_img = data.load_image(_existing(args.ri, "representative image")) if args.ri else None
    res = bench(m, h, w, args.repeats, ri_img, seed=args.seed)
    _write_json(res, args.out)
    if args.out not in (None, "-"):
        v = res["variants"]
        print(f"noclip {v['noclip']['mean_ms']:.3f} ms ({v['noclip']['elementwise_ops']} ops), "
              f"clipped {v['clipped']['mean_ms']:.3f} ms ({v['clipped']['elementwise_ops']} ops)")
    return EXIT_OK


def cmd_eval(args) -> int:
    _need(args, "model", "testset")
    m = _load_model(args.model)
    testset = data.load_corpus(_existing(args.testset, "test set"))
    scale = m.source.scale if isinstance(m, quant.QuantizedModel) else m.scale
    res = metrics.eval_model(m, testset, baseline=args.baseline, scale=scale)
    _write_json(res.to_dict(), args.out)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clipfree", description="INT8 PTQ lab for tiny x3 SR models")
    p.add_argument("--version", action="version", version=f"clipfree {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file of flag values; command-line flags win")
        sp.set_defaults(func=fn)
        return sp

    sp = cmd("synth", cmd_synth, "write a seeded synthetic corpus manifest")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n", type=int, default=64)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--name")
    sp.add_argument("--images-dir", help="also save the images as PPM files here")
    sp.add_argument("--out")

    sp = cmd("train", cmd_train, "train a tiny SR model")
    sp.add_argument("--arch", choices=zoo.ARCHS)
    sp.add_argument("--clipped", action="store_true", help="append ClippedReLU(0, 255)")
    sp.add_argument("--corpus", help="corpus manifest or directory of PGM/PPM images")
    sp.add_argument("--epochs", type=int, default=train.TrainConfig.epochs)
    sp.add_argument("--patches-per-epoch", type=int, default=train.TrainConfig.patches_per_epoch)
    sp.add_argument("--loss", choices=("l1", "l2"), default="l1")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--log", help="training log (JSON lines); default <out>.log.jsonl")
    sp.add_argument("--out")

    sp = cmd("quantize", cmd_quantize, "static INT8 PTQ with a single representative image")
    sp.add_argument("--model")
    sp.add_argument("--ri", help="representative image (PGM/PPM)")
    sp.add_argument("--grayscale", action="store_true", help="convert the RI to grayscale first")
    sp.add_argument("--calibration", help="use a saved calibration record instead of --ri")
    sp.add_argument("--bits", type=int, default=8)
    sp.add_argument("--out")

    sp = cmd("cfqp", cmd_cfqp, "select or augment a representative image")
    sp.add_argument("--model")
    sp.add_argument("--image")
    sp.add_argument("--thresholds-json")
    sp.add_argument("--out", help="augmented RI (.pgm or .ppm); JSON sidecar at <out>.json")

    sp = cmd("sweep", cmd_sweep, "quantize once per corpus image and evaluate each")
    sp.add_argument("--model")
    sp.add_argument("--corpus")
    sp.add_argument("--testset")
    sp.add_argument("--mode", choices=("raw", "cfqp"), default="raw")
    sp.add_argument("--thresholds-json")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--no-timing", action="store_true", help="write 0 for ms_per_inference")
    sp.add_argument("--out")

    sp = cmd("bench", cmd_bench, "clipped vs no-clip INT8 forward timing")
    sp.add_argument("--model")
    sp.add_argument("--input-size", default="64x64")
    sp.add_argument("--repeats", type=int, default=100)
    sp.add_argument("--ri")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="JSON report; stdout when omitted")

    sp = cmd("eval", cmd_eval, "PSNR/SSIM of a float or quantized model")
    sp.add_argument("--model")
    sp.add_argument("--testset")
    sp.add_argument("--baseline", action="store_true", help="include bicubic upscaling")
    sp.add_argument("--out", help="EvalResult JSON; stdout when omitted")
    return p


def _apply_config(parser, argv, args):
    """Re-parse with the config file's values as defaults."""
    try:
        cfg = json.loads(_existing(args.config, "config file").read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.config}: malformed config JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{args.config}: config must be a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items() if k != "schema_version"}
    reserved = {"command", "func", "config"}
    unknown = sorted((set(cfg) - set(vars(args))) | (reserved & set(cfg)))
    if unknown:
        raise UsageError(f"{args.config}: unknown config keys: {unknown}")
    sub = next(a for a in parser._subparsers._group_actions if isinstance(a, argparse._SubParsersAction))
    sub.choices[args.command].set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            args = _apply_config(parser, argv, args)
        return args.func(args)
    except UsageError as exc:
        print(f"clipfree {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CalibrationError as exc:
        print(f"clipfree {args.command}: calibration error: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except ContractError as exc:
        print(f"clipfree {args.command}: contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (FileNotFoundError, FormatError, StructuralError, ValueError) as exc:
        print(f"clipfree {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        print(f"clipfree {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
