"""Three-stage training with disjoint parameter selections.

Stage 1 tunes only the feature projector, stage 2 only the decoder's q/k/v
attention weights and biases, stage 3 only the low-rank adapter factors.
Everything else - both vision encoders above all - stays bitwise frozen
throughout; each stage resumes from the previous stage's checkpoint.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .dataset import InstructionRecord, read_records
from .images import read_image
from .model import TokenSequence, VisualPromptModel, masked_token_accuracy
from .tensor import ParamId, ParameterStore, Tensor, add, backward, mul, no_grad, tensor

STAGES = (1, 2, 3)

_STAGE2_RE = re.compile(r"decoder\.blocks\.\d+\.attn\.h\d+\.[wb][qkv]$")


class TrainingError(ValueError):
    pass


class TrainingDiverged(ArithmeticError):
    """Loss went NaN/inf; surfaced as a numeric failure."""


@dataclass(frozen=True)
class StageConfig:
    stage: int
    datasets: tuple[str, ...]
    epochs: int
    batch_size: int = 4
    learning_rate: float = 2e-5
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise TrainingError(f"stage must be one of {STAGES}, got {self.stage}")
        if not self.datasets:
            raise TrainingError(f"stage {self.stage}: no datasets configured")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise TrainingError(f"learning rate must be positive, got {self.learning_rate}")


@dataclass
class TrainReport:
    stage: int
    epochs: int
    records: int
    epoch_losses: list[float]
    final_masked_accuracy: float
    updated_param_ids: list[ParamId]
    wall_time_s: float

    def to_json_dict(self) -> dict:
        # wall time deliberately stays out: persisted reports must be
        # byte-identical across reruns of the same seed.
        return {
            "stage": self.stage,
            "epochs": self.epochs,
            "records": self.records,
            "epoch_losses": self.epoch_losses,
            "final_masked_accuracy": self.final_masked_accuracy,
            "updated_param_ids": list(self.updated_param_ids),
        }


def trainable_set(store: ParameterStore, stage: int) -> frozenset[ParamId]:
    """ParamIds a given stage is allowed to move."""
    if stage == 1:
        return store.select(lambda n: n.startswith("projector."))
    if stage == 2:
        return store.select(lambda n: _STAGE2_RE.fullmatch(n) is not None)
    if stage == 3:
        return store.select(lambda n: ".lora." in n)
    raise TrainingError(f"unknown stage {stage}")


class AdamW:
    """Decoupled-weight-decay Adam over an explicit parameter subset."""

    def __init__(self, params: list[tuple[ParamId, Tensor]], cfg: StageConfig):
        self.params = params
        self.cfg = cfg
        self.state: dict[ParamId, tuple[np.ndarray, np.ndarray]] = {
            pid: (np.zeros_like(t.data), np.zeros_like(t.data)) for pid, t in params
        }
        self.step_count = 0

    def step(self) -> None:
        missing = [pid for pid, t in self.params if t.grad is None]
        if missing:
            raise TrainingError(f"AdamW.step: missing gradients for param ids {missing}")
        self.step_count += 1
        b1, b2 = self.cfg.betas
        lr = self.cfg.learning_rate
        eps = 1e-8
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for pid, t in self.params:
            m, v = self.state[pid]
            g = t.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + eps)
            if self.cfg.weight_decay:
                update = update + self.cfg.weight_decay * t.data
            t.data = t.data - lr * update


def clip_global_norm(params: list[tuple[ParamId, Tensor]], max_norm: float) -> float:
    total = 0.0
    for _, t in params:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = total ** 0.5
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, t in params:
            if t.grad is not None:
                t.grad *= scale
    return norm


def build_training_sequences(
    model: VisualPromptModel,
    records: list[InstructionRecord],
    base_dir: str | Path,
) -> list[TokenSequence]:
    """Encode every record once; the vision stack is frozen in all stages,
    so features are constants for the whole run."""
    base = Path(base_dir)
    seqs: list[TokenSequence] = []
    for rec in records:
        image = read_image(base / rec.image)
        with no_grad():
            img_feats, vp_feats, _ = model.encode_views(image, rec.prompt_specs())
        seq = TokenSequence(
            model.vocab,
            img_feats,
            vp_feats,
            model.vocab.encode(rec.instruction),
            model.vocab.encode(rec.answer),
            include_eos=True,
        )
        seq.validate()
        seqs.append(seq)
    return seqs


def _snapshot(store: ParameterStore, ids: frozenset[ParamId] | None = None) -> dict[ParamId, bytes]:
    return {pid: t.data.tobytes() for pid, _, t in store.items() if ids is None or pid in ids}


def train_stage(
    model: VisualPromptModel,
    cfg: StageConfig,
    sequences: list[TokenSequence],
) -> TrainReport:
    if not sequences:
        raise TrainingError(f"stage {cfg.stage}: empty training set")
    t0 = time.perf_counter()
    selector = trainable_set(model.store, cfg.stage)
    params = [(pid, t) for pid, _, t in model.store.items() if pid in selector]
    before = _snapshot(model.store)
    opt = AdamW(params, cfg)
    rng = np.random.default_rng([cfg.seed, cfg.stage])
    n = len(sequences)
    epoch_losses: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        batch_losses: list[float] = []
        for start in range(0, n, cfg.batch_size):
            batch = [sequences[i] for i in order[start : start + cfg.batch_size]]
            model.store.zero_grads()
            total = None
            for seq in batch:
                loss = model.forward_loss(seq)
                total = loss if total is None else add(total, loss)
            mean = mul(total, tensor(1.0 / len(batch)))
            value = mean.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"stage {cfg.stage} epoch {epoch}: loss became {value}"
                )
            backward(mean)
            clip_global_norm(params, cfg.grad_clip)
            opt.step()
            batch_losses.append(value)
        epoch_losses.append(float(np.mean(batch_losses)))

    after = _snapshot(model.store)
    updated = sorted(pid for pid in after if before[pid] != after[pid])
    illegal = [pid for pid in updated if pid not in selector]
    if illegal:
        raise TrainingError(f"stage {cfg.stage} touched frozen params {illegal}")
    accuracy = masked_token_accuracy(model, sequences)
    return TrainReport(
        stage=cfg.stage,
        epochs=cfg.epochs,
        records=n,
        epoch_losses=epoch_losses,
        final_masked_accuracy=accuracy,
        updated_param_ids=updated,
        wall_time_s=time.perf_counter() - t0,
    )


def run_pipeline(
    model: VisualPromptModel,
    stage_cfgs: list[StageConfig],
    out_dir: str | Path,
    data_root: str | Path,
) -> list[TrainReport]:
    """Run stages 1 -> 2 -> 3, checkpointing after each.

    Stage k starts from the stage k-1 checkpoint (the initial weights for
    stage 1), so the on-disk trail mirrors the curriculum exactly.
    """
    if [c.stage for c in stage_cfgs] != list(STAGES):
        raise TrainingError(
            f"pipeline needs stages {list(STAGES)} in order, got {[c.stage for c in stage_cfgs]}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "stage0.ckpt", model.store)
    reports: list[TrainReport] = []
    for cfg in stage_cfgs:
        model.load_weights(out / f"stage{cfg.stage - 1}.ckpt")
        sequences: list[TokenSequence] = []
        for ds in cfg.datasets:
            path = Path(data_root) / ds
            # record image refs are relative to the JSONL that holds them
            sequences.extend(build_training_sequences(model, read_records(path), path.parent))
        reports.append(train_stage(model, cfg, sequences))
        save_checkpoint(out / f"stage{cfg.stage}.ckpt", model.store)
    return reports
