"""Causal decoder with visual-token injection and per-head LoRA adapters.

A sequence is always laid out as

    <img> [image tokens] <vp> [prompt tokens] <sep> instruction <sep> answer <eos>

where the two visual blocks come from the shared encoders projected into
decoder width by one affine map (the projector), and the text blocks are
ordinary embedded token ids. The loss masks everything except the answer
tokens and the closing <eos>.

Every attention projection (q, k, v and the per-head output weights) carries
an optional low-rank adapter: effective weight = base + (B A)^T with B
zero-initialised, so a fresh adapter leaves the layer bit-for-bit identical
to the base computation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import encoder as enc
from .checkpoint import apply_checkpoint, load_checkpoint, save_checkpoint
from .prompts import Level, PromptSpec, lambda_selector, level_of, rasterize
from .tensor import (
    ParameterStore,
    Tensor,
    add,
    backward,
    concat,
    cross_entropy,
    embedding,
    gelu,
    layer_norm,
    matmul,
    mul,
    no_grad,
    parameter,
    reshape,
    softmax,
    tensor,
    transpose_last,
)
from .vocab import EOS, IMG, SEP, VP, Vocab

_NEG_INF = -1e9  # finite stand-in so softmax never sees an actual infinity


class ModelConfigError(ValueError):
    pass


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class DecoderConfig:
    width: int = 32
    layers: int = 2
    heads: int = 2
    ff_mult: int = 2
    lora_rank: int = 4
    max_seq: int = 256

    def __post_init__(self) -> None:
        if self.width % self.heads:
            raise ModelConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if min(self.width, self.layers, self.heads, self.ff_mult, self.lora_rank, self.max_seq) < 1:
            raise ModelConfigError("all decoder dimensions must be positive")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


LORA_TARGETS = ("q", "k", "v", "o")


def attention(q: Tensor, k: Tensor, v: Tensor, d_k: int, causal: bool = True) -> Tensor:
    """Scaled dot-product attention for one head, optionally causal."""
    scores = mul(matmul(q, transpose_last(k)), tensor(1.0 / math.sqrt(d_k)))
    if causal:
        t = scores.shape[0]
        mask = np.triu(np.full((t, t), _NEG_INF), k=1)
        scores = add(scores, tensor(mask))
    return matmul(softmax(scores), v)


class VisualPromptModel:
    """Encoders + projector + LoRA-adapted causal decoder in one registry."""

    def __init__(
        self,
        vocab: Vocab,
        enc_cfg: enc.EncoderConfig | None = None,
        dec_cfg: DecoderConfig | None = None,
        seed: int = 0,
    ):
        self.vocab = vocab
        self.enc_cfg = enc_cfg or enc.EncoderConfig()
        self.dec_cfg = dec_cfg or DecoderConfig()
        self.store = ParameterStore()
        self._mov: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # -- construction ------------------------------------------------------

    def _reg(self, name: str, data: np.ndarray) -> Tensor:
        t = parameter(data)
        self.store.register(name, t)
        return t

    def _init_params(self, rng: np.random.Generator) -> None:
        for name, arr in enc.init_params(self.enc_cfg, rng).items():
            self._mov[name] = self._reg(f"mov.{name}", arr)

        d = self.dec_cfg
        total = self.enc_cfg.total_dim
        self._reg("projector.weight", rng.normal(0.0, 1.0 / math.sqrt(total), (total, d.width)))
        self._reg("projector.bias", np.zeros(d.width))

        v = len(self.vocab)
        self._reg("decoder.embed", rng.normal(0.0, 0.1, (v, d.width)))
        self._reg("decoder.pos", rng.normal(0.0, 0.2, (d.max_seq, d.width)))
        w_std = 1.0 / math.sqrt(d.width)
        for l in range(d.layers):
            blk = f"decoder.blocks.{l}"
            self._reg(f"{blk}.ln1.gain", np.ones(d.width))
            self._reg(f"{blk}.ln1.bias", np.zeros(d.width))
            for h in range(d.heads):
                hd = d.head_dim
                stem = f"{blk}.attn.h{h}"
                for t in ("q", "k", "v"):
                    self._reg(f"{stem}.w{t}", rng.normal(0.0, w_std, (d.width, hd)))
                    self._reg(f"{stem}.b{t}", np.zeros(hd))
                self._reg(f"{stem}.wo", rng.normal(0.0, 1.0 / math.sqrt(hd), (hd, d.width)))
                r = d.lora_rank
                for t in ("q", "k", "v"):
                    self._reg(f"{stem}.lora.{t}.a", rng.normal(0.0, 0.1, (r, d.width)))
                    self._reg(f"{stem}.lora.{t}.b", np.zeros((hd, r)))
                self._reg(f"{stem}.lora.o.a", rng.normal(0.0, 0.1, (r, hd)))
                self._reg(f"{stem}.lora.o.b", np.zeros((d.width, r)))
            self._reg(f"{blk}.ln2.gain", np.ones(d.width))
            self._reg(f"{blk}.ln2.bias", np.zeros(d.width))
            ff = d.width * d.ff_mult
            self._reg(f"{blk}.ff.w1", rng.normal(0.0, w_std, (d.width, ff)))
            self._reg(f"{blk}.ff.b1", np.zeros(ff))
            self._reg(f"{blk}.ff.w2", rng.normal(0.0, 1.0 / math.sqrt(ff), (ff, d.width)))
            self._reg(f"{blk}.ff.b2", np.zeros(d.width))
        self._reg("decoder.lnf.gain", np.ones(d.width))
        self._reg("decoder.lnf.bias", np.zeros(d.width))

    def p(self, name: str) -> Tensor:
        return self.store.tensor(name)

    # -- vision ------------------------------------------------------------

    def encode_image(self, image: np.ndarray, level: Level | None = None) -> enc.MoVFeatures:
        return enc.encode(image, self._mov, self.enc_cfg, level)

    def encode_views(
        self,
        image: np.ndarray,
        prompts: Sequence[PromptSpec],
        point_radius: int | None = None,
    ) -> tuple[enc.MoVFeatures, enc.MoVFeatures, Level]:
        """Embed the camera image and its prompt raster with the same weights."""
        level = level_of(prompts)
        h, w = image.shape[0], image.shape[1]
        raster = rasterize(prompts, width=w, height=h, point_radius=point_radius)
        img_feats = self.encode_image(image, level)
        vp_feats = enc.encode(raster.data, self._mov, self.enc_cfg, level)
        return img_feats, vp_feats, level

    def project(self, feats: enc.MoVFeatures) -> Tensor:
        """Affine map from encoder space into decoder width (shared for both views)."""
        return add(matmul(feats.tokens, self.p("projector.weight")), self.p("projector.bias"))

    # -- decoder -----------------------------------------------------------

    def attention_block(self, layer: int, x: Tensor, use_lora: bool, causal: bool = True) -> Tensor:
        """Multi-head attention summed over per-head output projections.

        With `use_lora`, every per-head weight W is replaced by
        W + (B A)^T; zero-initialised B keeps the result identical to the
        base path.
        """
        d = self.dec_cfg
        out: Tensor | None = None
        for h in range(d.heads):
            stem = f"decoder.blocks.{layer}.attn.h{h}"

            def eff(target: str, base: Tensor) -> Tensor:
                if not use_lora:
                    return base
                a = self.p(f"{stem}.lora.{target}.a")
                b = self.p(f"{stem}.lora.{target}.b")
                return add(base, matmul(transpose_last(a), transpose_last(b)))

            q = add(matmul(x, eff("q", self.p(f"{stem}.wq"))), self.p(f"{stem}.bq"))
            k = add(matmul(x, eff("k", self.p(f"{stem}.wk"))), self.p(f"{stem}.bk"))
            v = add(matmul(x, eff("v", self.p(f"{stem}.wv"))), self.p(f"{stem}.bv"))
            head = attention(q, k, v, d.head_dim, causal=causal)
            proj = matmul(head, eff("o", self.p(f"{stem}.wo")))
            out = proj if out is None else add(out, proj)
        assert out is not None
        return out

    def _block(self, layer: int, x: Tensor, use_lora: bool) -> Tensor:
        blk = f"decoder.blocks.{layer}"
        h = layer_norm(x, self.p(f"{blk}.ln1.gain"), self.p(f"{blk}.ln1.bias"))
        x = add(x, self.attention_block(layer, h, use_lora))
        h = layer_norm(x, self.p(f"{blk}.ln2.gain"), self.p(f"{blk}.ln2.bias"))
        inner = gelu(add(matmul(h, self.p(f"{blk}.ff.w1")), self.p(f"{blk}.ff.b1")))
        return add(x, add(matmul(inner, self.p(f"{blk}.ff.w2")), self.p(f"{blk}.ff.b2")))

    def forward_hidden(self, seq: "TokenSequence", use_lora: bool = True) -> Tensor:
        t = seq.length
        if t > self.dec_cfg.max_seq:
            raise SequenceError(f"sequence length {t} exceeds max_seq {self.dec_cfg.max_seq}")
        embed = self.p("decoder.embed")
        parts: list[Tensor] = []
        for kind, payload in seq.segments:
            if kind == "ids":
                parts.append(embedding(embed, payload))
            else:
                parts.append(self.project(payload))
        x = concat(parts, axis=0)
        x = add(x, embedding(self.p("decoder.pos"), np.arange(t)))
        for l in range(self.dec_cfg.layers):
            x = self._block(l, x, use_lora)
        return layer_norm(x, self.p("decoder.lnf.gain"), self.p("decoder.lnf.bias"))

    def forward_logits(self, seq: "TokenSequence", use_lora: bool = True) -> Tensor:
        hidden = self.forward_hidden(seq, use_lora)
        return matmul(hidden, transpose_last(self.p("decoder.embed")))  # tied head

    def forward_loss(self, seq: "TokenSequence", use_lora: bool = True) -> Tensor:
        """Next-token cross-entropy averaged over answer + <eos> targets."""
        targets, weights = seq.shifted_targets()
        if weights.sum() == 0:
            raise SequenceError("loss mask is empty: sequence has no answer tokens")
        logits = self.forward_logits(seq, use_lora)
        ce = cross_entropy(logits, targets)
        t = seq.length
        return reshape(matmul(reshape(ce, (1, t)), tensor(weights[:, None])), ())

    # -- persistence -------------------------------------------------------

    def save_weights(self, path: str | Path) -> None:
        save_checkpoint(path, self.store)

    def load_weights(self, path: str | Path) -> None:
        apply_checkpoint(self.store, load_checkpoint(path))


class TokenSequence:
    """One assembled decoder input with its loss mask.

    segments: list of ("ids", np int array) and ("feat", MoVFeatures) pieces
    in canonical order. Feature positions carry token id -1 in `token_ids`.
    """

    def __init__(
        self,
        vocab: Vocab,
        img_feats: enc.MoVFeatures,
        vp_feats: enc.MoVFeatures,
        instr_ids: Sequence[int],
        answer_ids: Sequence[int],
        include_eos: bool,
    ):
        if img_feats.tokens.shape != vp_feats.tokens.shape:
            raise SequenceError(
                f"image/prompt feature shapes differ: {img_feats.tokens.shape} vs {vp_feats.tokens.shape}"
            )
        if len(instr_ids) == 0:
            raise SequenceError("empty instruction")
        self.vocab = vocab
        self.img_feats = img_feats
        self.vp_feats = vp_feats
        self.instr_ids = np.asarray(list(instr_ids), dtype=np.int64)
        self.answer_ids = np.asarray(list(answer_ids), dtype=np.int64)
        self.include_eos = include_eos

        n_vis = img_feats.tokens.shape[0]
        img_id, vp_id, sep_id, eos_id = (vocab.id(t) for t in (IMG, VP, SEP, EOS))
        self.segments: list[tuple[str, object]] = [
            ("ids", np.array([img_id])),
            ("feat", img_feats),
            ("ids", np.array([vp_id])),
            ("feat", vp_feats),
            ("ids", np.array([sep_id])),
            ("ids", self.instr_ids),
            ("ids", np.array([sep_id])),
        ]
        tail: list[int] = list(self.answer_ids)
        if include_eos:
            tail.append(eos_id)
        if tail:
            self.segments.append(("ids", np.array(tail, dtype=np.int64)))

        ids: list[int] = [img_id]
        ids += [-1] * n_vis
        ids.append(vp_id)
        ids += [-1] * n_vis
        ids.append(sep_id)
        ids += list(self.instr_ids)
        ids.append(sep_id)
        answer_start = len(ids)
        ids += tail
        self.token_ids = np.array(ids, dtype=np.int64)
        self.length = len(ids)
        self.answer_start = answer_start
        mask = np.zeros(self.length, dtype=bool)
        mask[answer_start:] = True
        self.loss_mask = mask

    def validate(self) -> None:
        img_id, vp_id = self.vocab.id(IMG), self.vocab.id(VP)
        if int((self.token_ids == img_id).sum()) != 1 or int((self.token_ids == vp_id).sum()) != 1:
            raise SequenceError("sequence must contain exactly one <img> and one <vp> block")
        n_answer = len(self.answer_ids) + (1 if self.include_eos else 0)
        if int(self.loss_mask.sum()) != n_answer:
            raise SequenceError("loss mask does not cover exactly the answer + <eos> span")
        if self.loss_mask[: self.answer_start].any():
            raise SequenceError("loss mask leaks outside the answer span")

    def shifted_targets(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-position next-token targets and mean-loss weights."""
        t = self.length
        targets = np.zeros(t, dtype=np.int64)
        weights = np.zeros(t, dtype=np.float64)
        hot = 0
        for i in range(t - 1):
            nxt = self.token_ids[i + 1]
            if nxt >= 0 and self.loss_mask[i + 1]:
                targets[i] = nxt
                hot += 1
        if hot:
            for i in range(t - 1):
                nxt = self.token_ids[i + 1]
                if nxt >= 0 and self.loss_mask[i + 1]:
                    weights[i] = 1.0 / hot
        return targets, weights


@dataclass
class GenerationResult:
    text: str
    token_ids: list[int]
    logprobs: list[float]
    truncated: bool
    level: Level
    selector: tuple[int, int, int]


def generate(
    model: VisualPromptModel,
    image: np.ndarray,
    prompts: Sequence[PromptSpec],
    instruction: str,
    max_len: int = 96,
    use_lora: bool = True,
    point_radius: int | None = None,
) -> GenerationResult:
    """Greedy decoding until <eos> or `max_len` generated tokens."""
    with no_grad():
        img_feats, vp_feats, level = model.encode_views(image, prompts, point_radius)
        instr_ids = model.vocab.encode(instruction)
        eos_id = model.vocab.id(EOS)
        out_ids: list[int] = []
        logprobs: list[float] = []
        truncated = True
        for _ in range(max_len):
            seq = TokenSequence(model.vocab, img_feats, vp_feats, instr_ids, out_ids, include_eos=False)
            logits = model.forward_logits(seq, use_lora).data[-1]
            shifted = logits - logits.max()
            logz = math.log(np.exp(shifted).sum())
            nxt = int(np.argmax(logits))
            logprobs.append(float(shifted[nxt] - logz))
            if nxt == eos_id:
                truncated = False
                break
            out_ids.append(nxt)
        text = model.vocab.decode(out_ids)
    return GenerationResult(
        text=text,
        token_ids=out_ids,
        logprobs=logprobs,
        truncated=truncated,
        level=level,
        selector=lambda_selector(level),
    )


def masked_token_accuracy(model: VisualPromptModel, sequences: Sequence[TokenSequence]) -> float:
    """Teacher-forced next-token accuracy over every loss-mask position."""
    hits = 0
    total = 0
    with no_grad():
        for seq in sequences:
            targets, weights = seq.shifted_targets()
            logits = model.forward_logits(seq).data
            pred = logits.argmax(axis=-1)
            live = weights > 0
            hits += int((pred[live] == targets[live]).sum())
            total += int(live.sum())
    if total == 0:
        raise SequenceError("no masked positions to score")
    return hits / total


# -- model directory bundles ------------------------------------------------

def save_model_dir(model: VisualPromptModel, out_dir: str | Path, ckpt_name: str = "final.ckpt") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = {"encoder": asdict(model.enc_cfg), "decoder": asdict(model.dec_cfg)}
    (out / "model_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    model.vocab.to_json(out / "vocab.json")
    model.save_weights(out / ckpt_name)


def load_model_dir(model_dir: str | Path, ckpt_name: str = "final.ckpt") -> VisualPromptModel:
    mdir = Path(model_dir)
    cfg = json.loads((mdir / "model_config.json").read_text())
    enc_cfg = enc.EncoderConfig(
        conv_channels=tuple(cfg["encoder"]["conv_channels"]),
        patch_size=cfg["encoder"]["patch_size"],
        embed_dim=cfg["encoder"]["embed_dim"],
        token_grid=cfg["encoder"]["token_grid"],
        scales=tuple(cfg["encoder"]["scales"]),
    )
    dec_cfg = DecoderConfig(**cfg["decoder"])
    vocab = Vocab.from_json(mdir / "vocab.json")
    model = VisualPromptModel(vocab, enc_cfg, dec_cfg, seed=0)
    model.load_weights(mdir / ckpt_name)
    return model


__all__ = [
    "DecoderConfig",
    "GenerationResult",
    "ModelConfigError",
    "SequenceError",
    "TokenSequence",
    "VisualPromptModel",
    "attention",
    "generate",
    "load_model_dir",
    "masked_token_accuracy",
    "save_model_dir",
    "backward",
]
