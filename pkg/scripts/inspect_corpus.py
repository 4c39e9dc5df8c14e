#!/usr/bin/env python3
"""Summarize an instruction JSONL and preview its prompt rasters.

Prints per-task record counts, answer/instruction token-length stats, and the
decoder sequence length each record would occupy for a given visual token
grid, so max_seq can be chosen from data instead of trial and error. With
--dump-raster N the Nth record's prompt raster is written next to --out as a
PPM for eyeballing.

Usage:
    python3 scripts/inspect_corpus.py data/corpus.jsonl
    python3 scripts/inspect_corpus.py data/corpus.jsonl --token-grid 2 --dump-raster 0
"""

from __future__ import annotations

import argparse
from collections import Counter
from pathlib import Path

import numpy as np

from markvlm.dataset import read_records
from markvlm.images import write_ppm
from markvlm.prompts import rasterize
from markvlm.vocab import split_text


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("jsonl", help="instruction records to inspect")
    ap.add_argument("--token-grid", type=int, default=8,
                    help="visual token grid per view (sequence-length estimate)")
    ap.add_argument("--dump-raster", type=int, metavar="N",
                    help="write record N's prompt raster as a PPM")
    ap.add_argument("--out", default=".", help="directory for dumped rasters")
    args = ap.parse_args(argv)

    records = read_records(args.jsonl)
    if not records:
        print("no records")
        return 1

    by_task = Counter(rec.task.value for rec in records)
    print(f"{len(records)} records in {args.jsonl}")
    for task, n in sorted(by_task.items()):
        print(f"  {task}: {n}")

    n_vis = args.token_grid * args.token_grid
    instr_lens = [len(split_text(rec.instruction)) for rec in records]
    answer_lens = [len(split_text(rec.answer)) for rec in records]
    # <img> tokens <sep> tokens <sep> instruction <sep> answer <eos>
    seq_lens = [1 + n_vis + 1 + n_vis + 1 + i + 1 + a + 1
                for i, a in zip(instr_lens, answer_lens)]
    for label, lens in (("instruction", instr_lens), ("answer", answer_lens),
                        (f"sequence (grid {args.token_grid})", seq_lens)):
        arr = np.asarray(lens)
        print(f"  {label} tokens: min {arr.min()} median {int(np.median(arr))} max {arr.max()}")
    print(f"  suggested max_seq >= {max(seq_lens)}")

    marks = Counter(len(rec.prompts) for rec in records)
    print("  prompts per record: " +
          ", ".join(f"{k} marks x{v}" for k, v in sorted(marks.items())))

    if args.dump_raster is not None:
        if not 0 <= args.dump_raster < len(records):
            print(f"record index {args.dump_raster} out of range")
            return 1
        rec = records[args.dump_raster]
        raster = rasterize(rec.prompt_specs(), width=rec.width, height=rec.height)
        out = Path(args.out) / f"raster_{args.dump_raster}_{rec.task.value}.ppm"
        out.parent.mkdir(parents=True, exist_ok=True)
        write_ppm(out, raster.data)
        print(f"wrote {out} ({rec.width}x{rec.height}, level {rec.level.value})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
