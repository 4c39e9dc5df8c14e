"""Command-line entry point.

Subcommands: build-dataset, train, eval, infer, gradcheck. Every run is
deterministic given (--config, --seed): anything that depends on wall time
goes to stderr, never into persisted files. Exit codes: 0 success,
1 validation failure, 2 I/O failure, 3 numeric failure.
"""

from __future__ import annotations

import os

# Pin BLAS to one thread before numpy loads below: threaded GEMM may reorder
# reductions and break byte-identical reruns.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np

from .dataset import (
    INSTRUCTIONS,
    AnswerParseError,
    Task,
    augment_captions,
    from_classification_or_caption,
    from_detection,
    from_instance_seg,
    from_semantic_seg,
    ingest_coco_style,
    make_synthetic_corpus,
    parse_answer,
    read_records,
    write_records,
)
from .encoder import EncoderConfig
from .images import read_image
from .metrics import evaluate_run, task_family
from .model import (
    DecoderConfig,
    TokenSequence,
    VisualPromptModel,
    generate,
    load_model_dir,
    save_model_dir,
)
from .prompts import Level, PromptKind, PromptSpec, level_of
from .tensor import NonFiniteError, backward, finite_diff_check
from .training import StageConfig, TrainingDiverged, run_pipeline
from .vocab import Vocab

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class CliConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Shared plumbing


def _load_config(path_str: str | None) -> tuple[dict, Path]:
    if not path_str:
        raise CliConfigError("this subcommand needs --config")
    path = Path(path_str)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliConfigError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliConfigError(f"{path}: config must be a JSON object")
    return cfg, path.parent


def _require(cfg: dict, key: str) -> object:
    if key not in cfg:
        raise CliConfigError(f"config is missing the {key!r} key")
    return cfg[key]


def _resolve(base: Path, ref) -> Path:
    p = Path(str(ref))
    return p if p.is_absolute() else base / p


def _out_dir(args) -> Path:
    if not args.out:
        raise CliConfigError("this subcommand needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _note(args, message: str) -> None:
    if args.verbose:
        print(message, file=sys.stderr)


def _only_keys(d: dict, allowed: set[str], where: str) -> None:
    extra = sorted(set(d) - allowed)
    if extra:
        raise CliConfigError(f"{where}: unknown keys {extra}")


def _encoder_config(d: dict) -> EncoderConfig:
    _only_keys(d, {"conv_channels", "patch_size", "embed_dim", "token_grid", "scales"}, "model.encoder")
    kwargs = {}
    for key, value in d.items():
        kwargs[key] = tuple(value) if key in ("conv_channels", "scales") else int(value)
    return EncoderConfig(**kwargs)


def _decoder_config(d: dict) -> DecoderConfig:
    _only_keys(d, {"width", "layers", "heads", "ff_mult", "lora_rank", "max_seq"}, "model.decoder")
    return DecoderConfig(**{k: int(v) for k, v in d.items()})


# ---------------------------------------------------------------------------
# build-dataset


def cmd_build_dataset(args) -> int:
    out = _out_dir(args)
    cfg, base = _load_config(args.config)
    kind = str(cfg.get("kind", "synthetic"))
    failures: list[dict] = []

    if kind == "synthetic":
        jsonl = make_synthetic_corpus(out, seed=args.seed)
        records = read_records(jsonl)
    else:
        manifest = _resolve(base, _require(cfg, "manifest"))
        sources = ingest_coco_style(manifest, kind)
        _note(args, f"{manifest}: {len(sources)} sources")
        records = []
        if kind in ("classification", "caption"):
            for src in sources:
                records.extend(from_classification_or_caption(src))
        elif kind == "detection":
            detections = [from_detection(src) for src in sources]
            records.extend(detections)
            if cfg.get("augment", False):
                extra, fails = augment_captions(detections)
                records.extend(extra)
                failures = [{"index": i, "error": str(e)} for i, e in fails]
        elif kind == "instance_seg":
            records.extend(from_instance_seg(src) for src in sources)
        elif kind == "semantic_seg":
            grid = int(cfg.get("grid", 32))
            spp = int(cfg.get("samples_per_patch", 1))
            for i, src in enumerate(sources):
                records.append(
                    from_semantic_seg(src, grid=grid, samples_per_patch=spp, seed=args.seed + i)
                )
        else:
            raise CliConfigError(f"unknown dataset kind {kind!r}")
        # source image refs are relative to the manifest; record refs must be
        # relative to the JSONL we are about to write
        for rec in records:
            rec.image = os.path.relpath(_resolve(manifest.parent, rec.image), out)
        jsonl = out / "dataset.jsonl"
        write_records(jsonl, records)

    counts = Counter(rec.task.value for rec in records)
    report = {
        "kind": kind,
        "jsonl": jsonl.name,
        "records": len(records),
        "counts": dict(sorted(counts.items())),
        "augment_failures": failures,
    }
    _write_json(out / "build_report.json", report)
    for task_name, n in sorted(counts.items()):
        print(f"{task_name}: {n}")
    print(f"total: {len(records)} -> {jsonl}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


_STAGE_KEYS = {
    "stage", "datasets", "epochs", "batch_size", "learning_rate",
    "betas", "weight_decay", "grad_clip", "seed",
}


def _stage_config(entry: dict, default_seed: int) -> StageConfig:
    if not isinstance(entry, dict):
        raise CliConfigError("each stages[] entry must be an object")
    _only_keys(entry, _STAGE_KEYS, "stages[]")
    for key in ("stage", "datasets", "epochs"):
        _require(entry, key)
    kwargs = dict(entry)
    kwargs["stage"] = int(kwargs["stage"])
    kwargs["datasets"] = tuple(str(d) for d in kwargs["datasets"])
    kwargs["epochs"] = int(kwargs["epochs"])
    if "betas" in kwargs:
        kwargs["betas"] = tuple(float(b) for b in kwargs["betas"])
    kwargs.setdefault("seed", default_seed)
    return StageConfig(**kwargs)


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    out = _out_dir(args)
    cfg, base = _load_config(args.config)
    stages_cfg = cfg.get("stages")
    if not isinstance(stages_cfg, list) or not stages_cfg:
        raise CliConfigError("config needs a non-empty 'stages' list")
    stage_cfgs = [_stage_config(entry, args.seed) for entry in stages_cfg]
    data_root = _resolve(base, cfg.get("data_root", "."))

    model_cfg = cfg.get("model", {})
    _only_keys(model_cfg, {"encoder", "decoder", "seed"}, "model")
    enc_cfg = _encoder_config(model_cfg.get("encoder", {}))
    dec_cfg = _decoder_config(model_cfg.get("decoder", {}))
    model_seed = int(model_cfg.get("seed", args.seed))

    # the vocabulary is fixed before stage 1 from every configured dataset
    texts: list[str] = []
    for sc in stage_cfgs:
        for ds in sc.datasets:
            for rec in read_records(data_root / ds):
                texts.append(rec.instruction)
                texts.append(rec.answer)
    vocab = Vocab.from_corpus(texts)
    _note(args, f"vocabulary: {len(vocab)} tokens")

    model = VisualPromptModel(vocab, enc_cfg, dec_cfg, seed=model_seed)
    reports = run_pipeline(model, stage_cfgs, out, data_root)
    save_model_dir(model, out)
    _write_json(out / "train_report.json", [r.to_json_dict() for r in reports])
    for r in reports:
        print(
            f"stage {r.stage}: {r.records} records, {r.epochs} epochs, "
            f"final loss {r.epoch_losses[-1]:.4f}, masked accuracy {r.final_masked_accuracy:.4f}, "
            f"{len(r.updated_param_ids)} params updated"
        )
    print(f"[time] {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    out = _out_dir(args)
    cfg, base = _load_config(args.config)
    model = load_model_dir(_resolve(base, _require(cfg, "model_dir")))
    ds_path = _resolve(base, _require(cfg, "dataset"))
    records = read_records(ds_path)
    if not records:
        raise CliConfigError(f"{ds_path}: empty test set")
    max_len = int(cfg.get("max_len", 96))

    grouped: dict[str, list[tuple[str, str, str]]] = {}
    for i, rec in enumerate(records):
        image = read_image(ds_path.parent / rec.image)
        result = generate(model, image, rec.prompt_specs(), rec.instruction, max_len=max_len)
        _note(args, f"r{i} [{rec.task.value}]: {result.text!r}")
        family = task_family(rec.task)
        ref_content = parse_answer(rec.answer, rec.task)
        try:
            gen_content = parse_answer(result.text, rec.task)
        except AnswerParseError:
            gen_content = None
        rows = grouped.setdefault(family, [])
        if family == "referring":
            # one sample per mark; an unparseable or missing prediction
            # degrades to a token-disjoint placeholder and scores zero
            gen_map = dict(gen_content.marks) if gen_content else {}
            for mark, ref_text in ref_content.marks:
                pred = gen_map.get(mark) or "?"
                rows.append((f"r{i}.m{mark}", pred, ref_text))
        else:
            ref_text = "\n".join(text for _, text in ref_content.marks)
            if gen_content is not None:
                pred = "\n".join(text for _, text in gen_content.marks)
            else:
                pred = result.text.strip() or "?"
            rows.append((f"r{i}", pred, ref_text))

    reports: dict[str, dict] = {}
    for family in sorted(grouped):
        rows = grouped[family]
        pred_path = out / f"{family}.pred.jsonl"
        ref_path = out / f"{family}.ref.jsonl"
        with open(pred_path, "w", encoding="utf-8") as fh:
            for rid, pred, _ in rows:
                fh.write(json.dumps({"id": rid, "text": pred}, separators=(",", ":")) + "\n")
        with open(ref_path, "w", encoding="utf-8") as fh:
            for rid, _, ref in rows:
                fh.write(json.dumps({"id": rid, "text": ref}, separators=(",", ":")) + "\n")
        report = evaluate_run(pred_path, ref_path, family)
        reports[family] = report.to_json_dict()
        print(f"[{family}] n={report.count}")
        print(report.to_table())
    _write_json(out / "eval_report.json", reports)
    print(f"[time] {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer


_DEFAULT_INSTRUCTION = {
    Level.IMAGE: INSTRUCTIONS[Task.SCENE_CLASSIFICATION],
    Level.REGION: INSTRUCTIONS[Task.REFERRING_BOX],
    Level.POINT: INSTRUCTIONS[Task.REFERRING_POINT],
}


def cmd_infer(args) -> int:
    cfg, base = _load_config(args.config)
    model = load_model_dir(_resolve(base, _require(cfg, "model_dir")))
    image = read_image(_resolve(base, _require(cfg, "image")))
    prompt_cfgs = _require(cfg, "prompts")
    if not isinstance(prompt_cfgs, list) or not prompt_cfgs:
        raise CliConfigError("config needs a non-empty 'prompts' list")
    try:
        prompts = [
            PromptSpec(PromptKind(p["kind"]), tuple(p["coords"]), int(p["mark"]))
            for p in prompt_cfgs
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise CliConfigError(f"bad prompt entry: {exc}") from exc
    level = level_of(prompts)
    instruction = str(cfg.get("instruction") or _DEFAULT_INSTRUCTION[level])
    result = generate(model, image, prompts, instruction, max_len=int(cfg.get("max_len", 96)))
    print(result.text)
    if args.out:
        payload = {
            "answer": result.text,
            "instruction": instruction,
            "level": result.level.value,
            "selector": list(result.selector),
            "token_ids": result.token_ids,
            "logprobs": result.logprobs,
            "truncated": result.truncated,
        }
        _write_json(_out_dir(args) / "infer.json", payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def toy_configs() -> tuple[EncoderConfig, DecoderConfig]:
    """Small enough for an end-to-end finite-difference sweep in seconds."""
    enc_cfg = EncoderConfig(
        conv_channels=(4, 4, 4), patch_size=4, embed_dim=4, token_grid=2, scales=(1, 2)
    )
    dec_cfg = DecoderConfig(width=8, layers=2, heads=2, ff_mult=2, lora_rank=2, max_seq=64)
    return enc_cfg, dec_cfg


def toy_example(seed: int = 0):
    """Deterministic (image, prompts, instruction, answer) for verification."""
    enc_cfg, _ = toy_configs()
    side = enc_cfg.pad_multiple
    rng = np.random.default_rng([seed, 5])
    image = rng.uniform(0.0, 1.0, size=(side, side, 3))
    prompts = [PromptSpec(PromptKind.BOX, (2.0, 2.0, 10.0, 9.0), 1)]
    instruction = INSTRUCTIONS[Task.REFERRING_BOX]
    answer = "<Region 1>: ship"
    return image, prompts, instruction, answer


def cmd_gradcheck(args) -> int:
    if args.eps <= 0:
        raise CliConfigError(f"--eps must be positive, got {args.eps}")
    t0 = time.perf_counter()
    enc_cfg, dec_cfg = toy_configs()
    image, prompts, instruction, answer = toy_example(args.seed)
    vocab = Vocab.from_corpus([instruction, answer])
    model = VisualPromptModel(vocab, enc_cfg, dec_cfg, seed=args.seed)
    instr_ids = vocab.encode(instruction)
    answer_ids = vocab.encode(answer)

    def loss():
        img_feats, vp_feats, _ = model.encode_views(image, prompts)
        seq = TokenSequence(vocab, img_feats, vp_feats, instr_ids, answer_ids, include_eos=True)
        return model.forward_loss(seq)

    # A key bias adds the same offset to every attention score in a row, and
    # softmax is invariant to a per-row shift, so the true gradient of every
    # `.bk` tensor is identically zero. The relative-error quotient is
    # meaningless for those coordinates (it divides rounding noise by the
    # 1e-8 floor), so they are held to an exact-zero check instead and the
    # finite-difference sweep covers everything else.
    params: list = []
    key_biases: list = []
    for _, name, t in model.store.items():
        (key_biases if name.endswith(".bk") else params).append(t)
    coords = sum(t.size for t in params)
    bias_coords = sum(t.size for t in key_biases)
    _note(args, f"{len(params)} swept parameters ({coords} coordinates), "
                f"{len(key_biases)} key biases ({bias_coords} coordinates)")

    model.store.zero_grads()
    backward(loss())
    bias_grad = max(
        (float(np.abs(t.grad).max()) for t in key_biases if t.grad is not None),
        default=0.0,
    )
    model.store.zero_grads()

    err = finite_diff_check(loss, params, eps=args.eps)
    bias_ok = bias_grad <= 1e-12
    ok = err <= args.tol and bias_ok
    print(f"max relative error {err:.3e} over {coords} coordinates: "
          f"{'PASS' if ok else 'FAIL'} (tol {args.tol:g})")
    print(f"key-bias gradients (zero by score-shift invariance): "
          f"max |analytic| {bias_grad:.3e} over {bias_coords} coordinates: "
          f"{'PASS' if bias_ok else 'FAIL'} (tol 1e-12)")
    if args.out:
        _write_json(
            _out_dir(args) / "gradcheck.json",
            {"max_rel_error": err, "tolerance": args.tol, "eps": args.eps,
             "parameters": len(params), "coordinates": coords,
             "key_bias_max_abs_grad": bias_grad,
             "key_bias_coordinates": bias_coords, "passed": ok},
        )
    print(f"[time] {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="markvlm",
        description="Visual-prompt instruction model: data, training, eval, inference.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler, help_text: str):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--verbose", action="store_true")
        sp.set_defaults(handler=handler)
        return sp

    add("build-dataset", cmd_build_dataset, "ingest annotations and write an instruction JSONL")
    add("train", cmd_train, "run the three-stage pipeline and save the model")
    add("eval", cmd_eval, "generate over a test JSONL and score it")
    add("infer", cmd_infer, "answer one instruction over one image")
    gc = add("gradcheck", cmd_gradcheck, "finite-difference check of the full backward pass")
    gc.add_argument("--eps", type=float, default=1e-5, help="central-difference step")
    gc.add_argument("--tol", type=float, default=1e-4, help="max relative error allowed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
