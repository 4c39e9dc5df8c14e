"""Evaluation metrics: n-gram scores for captions, semantic scores for labels.

All metrics tokenize with the same split_text function the model vocabulary
uses, then lowercase, so train and eval never disagree about token
boundaries. Word-level metrics (METEOR, SS, S-IOU, accuracy) additionally
stem with a self-contained Porter stemmer. Every function is pure; corpus
metrics are invariant to corpus-order permutation.

Score ranges: BLEU, ROUGE-L, METEOR, SS, S-IOU and accuracy live in [0, 1];
CIDEr in [0, 10].
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import Task
from .vocab import split_text


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Porter stemmer


_VOWELS = "aeiou"


def _is_cons(word: str, i: int) -> bool:
    c = word[i]
    if c in _VOWELS:
        return False
    if c == "y":
        return i == 0 or not _is_cons(word, i - 1)
    return True


def _measure(stem: str) -> int:
    """Number of vowel-to-consonant transitions, the m of [C](VC)^m[V]."""
    m = 0
    prev_vowel = False
    for i in range(len(stem)):
        if _is_cons(stem, i):
            if prev_vowel:
                m += 1
            prev_vowel = False
        else:
            prev_vowel = True
    return m


def _has_vowel(stem: str) -> bool:
    return any(not _is_cons(stem, i) for i in range(len(stem)))


def _ends_double_cons(word: str) -> bool:
    return len(word) >= 2 and word[-1] == word[-2] and _is_cons(word, len(word) - 1)


def _ends_cvc(word: str) -> bool:
    if len(word) < 3:
        return False
    i = len(word) - 3
    return (
        _is_cons(word, i)
        and not _is_cons(word, i + 1)
        and _is_cons(word, i + 2)
        and word[-1] not in "wxy"
    )


_STEP2 = (
    ("ational", "ate"), ("tional", "tion"), ("enci", "ence"), ("anci", "ance"),
    ("izer", "ize"), ("ization", "ize"), ("ation", "ate"), ("ator", "ate"),
    ("alism", "al"), ("iveness", "ive"), ("fulness", "ful"), ("ousness", "ous"),
    ("aliti", "al"), ("iviti", "ive"), ("biliti", "ble"), ("abli", "able"),
    ("alli", "al"), ("entli", "ent"), ("ousli", "ous"), ("eli", "e"),
)

_STEP3 = (
    ("icate", "ic"), ("ative", ""), ("alize", "al"), ("iciti", "ic"),
    ("ical", "ic"), ("ful", ""), ("ness", ""),
)

_STEP4 = (
    "ement", "ment", "ance", "ence", "able", "ible", "ant", "ent", "ion",
    "ism", "ate", "iti", "ous", "ive", "ize", "al", "er", "ic", "ou",
)


def porter_stem(word: str) -> str:
    """Classic Porter stemmer over a lowercase alphabetic word.

    Non-alphabetic tokens and words shorter than three letters pass through
    unchanged.
    """
    if len(word) <= 2 or not word.isalpha():
        return word
    w = word

    # Step 1a
    if w.endswith("sses"):
        w = w[:-2]
    elif w.endswith("ies"):
        w = w[:-2]
    elif w.endswith("ss"):
        pass
    elif w.endswith("s"):
        w = w[:-1]

    # Step 1b
    flag_1b = False
    if w.endswith("eed"):
        if _measure(w[:-3]) > 0:
            w = w[:-1]
    elif w.endswith("ed") and _has_vowel(w[:-2]):
        w = w[:-2]
        flag_1b = True
    elif w.endswith("ing") and _has_vowel(w[:-3]):
        w = w[:-3]
        flag_1b = True
    if flag_1b:
        if w.endswith(("at", "bl", "iz")):
            w = w + "e"
        elif _ends_double_cons(w) and w[-1] not in "lsz":
            w = w[:-1]
        elif _measure(w) == 1 and _ends_cvc(w):
            w = w + "e"

    # Step 1c
    if w.endswith("y") and _has_vowel(w[:-1]):
        w = w[:-1] + "i"

    # Step 2
    for suffix, repl in _STEP2:
        if w.endswith(suffix):
            stem = w[: -len(suffix)]
            if _measure(stem) > 0:
                w = stem + repl
            break

    # Step 3
    for suffix, repl in _STEP3:
        if w.endswith(suffix):
            stem = w[: -len(suffix)]
            if _measure(stem) > 0:
                w = stem + repl
            break

    # Step 4
    for suffix in _STEP4:
        if w.endswith(suffix):
            stem = w[: -len(suffix)]
            if _measure(stem) > 1 and (suffix != "ion" or (stem and stem[-1] in "st")):
                w = stem
            break

    # Step 5a
    if w.endswith("e"):
        stem = w[:-1]
        m = _measure(stem)
        if m > 1 or (m == 1 and not _ends_cvc(stem)):
            w = stem

    # Step 5b
    if _measure(w) > 1 and _ends_double_cons(w) and w.endswith("l"):
        w = w[:-1]

    return w


# ---------------------------------------------------------------------------
# Tokenization shared with the model vocabulary


def metric_tokens(text: str) -> list[str]:
    return [t.lower() for t in split_text(text)]


def stemmed_tokens(text: str) -> list[str]:
    return [porter_stem(t) for t in metric_tokens(text)]


def normalize_label(text: str) -> str:
    return " ".join(porter_stem(t) for t in metric_tokens(text.strip()))


def _check_parallel(candidates: Sequence[str], references: Sequence) -> None:
    if len(candidates) != len(references):
        raise MetricError(
            f"{len(candidates)} candidates vs {len(references)} references"
        )
    if not candidates:
        raise MetricError("empty corpus")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# Caption metrics


def bleu_n(candidates: Sequence[str], references: Sequence[str], n: int) -> float:
    """Corpus BLEU: clipped n-gram precision, geometric mean over 1..n, with
    brevity penalty exp(min(0, 1 - ref_len/cand_len))."""
    if n < 1 or n > 4:
        raise MetricError(f"n must be in 1..4, got {n}")
    _check_parallel(candidates, references)
    cand_tokens = [metric_tokens(c) for c in candidates]
    ref_tokens = [metric_tokens(r) for r in references]

    log_sum = 0.0
    for k in range(1, n + 1):
        clipped = 0
        total = 0
        for ct, rt in zip(cand_tokens, ref_tokens):
            cc = _ngrams(ct, k)
            rc = _ngrams(rt, k)
            clipped += sum(min(count, rc[gram]) for gram, count in cc.items())
            total += max(0, len(ct) - k + 1)
        if total == 0 or clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    precision = math.exp(log_sum / n)

    cand_len = sum(len(t) for t in cand_tokens)
    ref_len = sum(len(t) for t in ref_tokens)
    if cand_len == 0:
        return 0.0
    bp = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return bp * precision


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidates: Sequence[str], references: Sequence[str], beta: float = 1.2) -> float:
    """Mean LCS F-measure with recall weight beta."""
    _check_parallel(candidates, references)
    total = 0.0
    for cand, ref in zip(candidates, references):
        ct = metric_tokens(cand)
        rt = metric_tokens(ref)
        lcs = _lcs_length(ct, rt)
        if lcs == 0:
            continue
        p = lcs / len(ct)
        r = lcs / len(rt)
        total += (1.0 + beta * beta) * p * r / (r + beta * beta * p)
    return total / len(candidates)


def _meteor_alignment(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Greedy left-to-right unigram alignment: exact pass, then stem pass."""
    pairs: list[tuple[int, int]] = []
    cand_used = [False] * len(cand)
    ref_used = [False] * len(ref)
    for key in (lambda t: t, porter_stem):
        ref_keys = [key(t) for t in ref]
        for i, token in enumerate(cand):
            if cand_used[i]:
                continue
            want = key(token)
            for j, have in enumerate(ref_keys):
                if not ref_used[j] and have == want:
                    pairs.append((i, j))
                    cand_used[i] = True
                    ref_used[j] = True
                    break
    pairs.sort()
    return pairs


def _meteor_chunks(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_simplified(candidates: Sequence[str], references: Sequence[str]) -> float:
    """METEOR with exact and stem alignment stages only.

    Per pair: F = 10PR / (R + 9P) over aligned unigrams, scaled by
    1 - 0.5 * (chunks/matches)^3; the corpus score is the per-pair mean.
    """
    _check_parallel(candidates, references)
    total = 0.0
    for cand, ref in zip(candidates, references):
        ct = metric_tokens(cand)
        rt = metric_tokens(ref)
        pairs = _meteor_alignment(ct, rt)
        m = len(pairs)
        if m == 0:
            continue
        p = m / len(ct)
        r = m / len(rt)
        f_mean = 10.0 * p * r / (r + 9.0 * p)
        penalty = 0.5 * (_meteor_chunks(pairs) / m) ** 3
        total += f_mean * (1.0 - penalty)
    return total / len(candidates)


def _tfidf_vector(counts: Counter, idf: dict) -> dict:
    return {g: c * idf[g] for g, c in counts.items() if idf.get(g, 0.0) > 0.0}


def _sparse_cosine(a: Mapping, b: Mapping) -> float:
    if not a or not b:
        return 0.0
    dot = sum(v * b[g] for g, v in a.items() if g in b)
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def cider(
    candidates: Sequence[str],
    references: Sequence[Sequence[str]] | Sequence[str],
    length_penalty_sigma: float | None = None,
) -> float:
    """Consensus captioning score: TF-IDF n-gram cosine, n = 1..4, scaled by 10.

    references holds one or more reference texts per candidate. The idf
    corpus is the reference side, one document per candidate, so at least
    two candidates are required. Setting length_penalty_sigma (canonically
    6) multiplies each cosine by a Gaussian penalty on the token-length gap.
    """
    _check_parallel(candidates, references)
    ref_groups: list[list[str]] = []
    for entry in references:
        group = [entry] if isinstance(entry, str) else list(entry)
        if not group:
            raise MetricError("reference group is empty")
        ref_groups.append(group)
    n_docs = len(ref_groups)
    if n_docs < 2:
        raise MetricError("idf needs at least two reference documents")
    if length_penalty_sigma is not None and length_penalty_sigma <= 0:
        raise MetricError("length_penalty_sigma must be positive")

    cand_tokens = [metric_tokens(c) for c in candidates]
    group_tokens = [[metric_tokens(r) for r in group] for group in ref_groups]

    idf_per_n: list[dict] = []
    for k in range(1, 5):
        df: Counter = Counter()
        for group in group_tokens:
            grams = set()
            for rt in group:
                grams.update(_ngrams(rt, k).keys())
            df.update(grams)
        idf_per_n.append(
            {g: math.log(n_docs) - math.log(max(1, c)) for g, c in df.items()}
        )

    total = 0.0
    for ct, group in zip(cand_tokens, group_tokens):
        sim_over_n = 0.0
        for k in range(1, 5):
            idf = idf_per_n[k - 1]
            cand_vec = _tfidf_vector(_ngrams(ct, k), idf)
            sim_over_refs = 0.0
            for rt in group:
                ref_vec = _tfidf_vector(_ngrams(rt, k), idf)
                sim = _sparse_cosine(cand_vec, ref_vec)
                if length_penalty_sigma is not None:
                    gap = len(ct) - len(rt)
                    sim *= math.exp(-(gap * gap) / (2.0 * length_penalty_sigma**2))
                sim_over_refs += sim
            sim_over_n += sim_over_refs / len(group)
        total += sim_over_n / 4.0
    return 10.0 * total / len(candidates)


# ---------------------------------------------------------------------------
# Label metrics


def default_embedder(text: str) -> dict[str, float]:
    """Stemmed bag-of-words term-frequency vector."""
    return dict(Counter(stemmed_tokens(text)))


def _dense_cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b)) / (na * nb)


def semantic_similarity(
    pred: str,
    gt: str,
    embedder: Callable[[str], Mapping] | Callable[[str], np.ndarray] | None = None,
) -> float:
    """Cosine similarity of label embeddings, clamped to [0, 1]."""
    if not pred.strip() or not gt.strip():
        raise MetricError("labels must be non-empty")
    if embedder is None:
        embedder = default_embedder
    a = embedder(pred)
    b = embedder(gt)
    if isinstance(a, np.ndarray):
        cos = _dense_cosine(a, np.asarray(b))
    else:
        cos = _sparse_cosine(a, b)
    return min(1.0, max(0.0, cos))


def s_iou(pred: str, gt: str) -> float:
    """Jaccard overlap of stemmed token sets."""
    if not pred.strip() or not gt.strip():
        raise MetricError("labels must be non-empty")
    a = set(stemmed_tokens(pred))
    b = set(stemmed_tokens(gt))
    union = a | b
    if not union:
        return 0.0
    return len(a & b) / len(union)


def accuracy(
    preds: Sequence[str],
    gts: Sequence[str],
    normalizer: Callable[[str], str] | None = None,
) -> float:
    """Exact-match rate after normalization (lowercase, trim, stem)."""
    _check_parallel(preds, gts)
    if normalizer is None:
        normalizer = normalize_label
    hits = sum(1 for p, g in zip(preds, gts) if normalizer(p) == normalizer(g))
    return hits / len(preds)


# ---------------------------------------------------------------------------
# Run evaluation


_CLASSIFICATION = "classification"
_CAPTIONING = "captioning"
_REFERRING = "referring"

_TASK_FAMILY = {
    Task.SCENE_CLASSIFICATION: _CLASSIFICATION,
    Task.IMAGE_CAPTION: _CAPTIONING,
    Task.REGION_CAPTION: _CAPTIONING,
    Task.GROUNDED_CAPTION: _CAPTIONING,
    Task.RELATIONSHIP: _CAPTIONING,
    Task.REFERRING_BOX: _REFERRING,
    Task.REFERRING_POINT: _REFERRING,
}


@dataclass
class MetricReport:
    task: str
    count: int
    scores: dict[str, float | str]

    def to_json_dict(self) -> dict:
        return {"task": self.task, "count": self.count, "scores": dict(self.scores)}

    def to_table(self) -> str:
        names = list(self.scores)
        values = [
            v if isinstance(v, str) else f"{v:.4f}" for v in self.scores.values()
        ]
        widths = [max(len(n), len(v)) for n, v in zip(names, values)]
        header = "  ".join(n.ljust(w) for n, w in zip(names, widths))
        row = "  ".join(v.ljust(w) for v, w in zip(values, widths))
        return header + "\n" + row


def read_id_text_jsonl(path: Path | str) -> list[tuple[str, str]]:
    path = Path(path)
    rows: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MetricError(f"{path}:{lineno}: {exc}") from exc
            if not isinstance(obj, dict) or "id" not in obj or "text" not in obj:
                raise MetricError(f"{path}:{lineno}: expected an object with id and text")
            rid = str(obj["id"])
            if rid in seen:
                raise MetricError(f"{path}:{lineno}: duplicate id {rid!r}")
            seen.add(rid)
            rows.append((rid, str(obj["text"])))
    return rows


def task_family(task) -> str:
    """Map a dataset task (or family name) to classification/captioning/referring."""
    if isinstance(task, Task):
        return _TASK_FAMILY[task]
    if task in (_CLASSIFICATION, _CAPTIONING, _REFERRING):
        return task
    try:
        return _TASK_FAMILY[Task(task)]
    except ValueError:
        raise MetricError(f"unknown task {task!r}") from None


def evaluate_run(
    predictions_path: Path | str,
    references_path: Path | str,
    task,
) -> MetricReport:
    """Score a prediction file against a reference file, aligned by id.

    Both files are JSONL with {id, text} per line. The task (a dataset task
    or one of the families classification/captioning/referring) selects the
    metric set. Captioning reports include a SPICE column marked n/a: that
    metric needs a scene-graph parser this package does not carry.
    """
    family = task_family(task)
    preds = read_id_text_jsonl(predictions_path)
    refs = read_id_text_jsonl(references_path)
    if not preds:
        raise MetricError(f"{predictions_path}: empty prediction file")
    if not refs:
        raise MetricError(f"{references_path}: empty reference file")
    pred_map = dict(preds)
    ref_ids = [rid for rid, _ in refs]
    missing = [rid for rid in ref_ids if rid not in pred_map]
    extra = [rid for rid in pred_map if rid not in set(ref_ids)]
    if missing or extra:
        raise MetricError(
            f"id mismatch: missing predictions for {missing[:5]}, unmatched {extra[:5]}"
        )
    cand = [pred_map[rid] for rid in ref_ids]
    gold = [text for _, text in refs]

    scores: dict[str, float | str] = {}
    if family == _CLASSIFICATION:
        scores["accuracy"] = accuracy(cand, gold)
    elif family == _CAPTIONING:
        for n in range(1, 5):
            scores[f"BLEU-{n}"] = bleu_n(cand, gold, n)
        scores["METEOR"] = meteor_simplified(cand, gold)
        scores["ROUGE-L"] = rouge_l(cand, gold)
        scores["CIDEr"] = cider(cand, gold)
        scores["SPICE"] = "n/a"
    else:
        scores["SS"] = sum(semantic_similarity(c, g) for c, g in zip(cand, gold)) / len(cand)
        scores["S-IOU"] = sum(s_iou(c, g) for c, g in zip(cand, gold)) / len(cand)
    return MetricReport(task=family, count=len(cand), scores=scores)


__all__ = [
    "MetricError",
    "MetricReport",
    "accuracy",
    "bleu_n",
    "cider",
    "default_embedder",
    "evaluate_run",
    "meteor_simplified",
    "metric_tokens",
    "normalize_label",
    "porter_stem",
    "read_id_text_jsonl",
    "rouge_l",
    "s_iou",
    "semantic_similarity",
    "stemmed_tokens",
    "task_family",
]
