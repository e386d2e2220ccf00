"""Four-stage training schedule.

====== ======================================= ==========================
stage  objective                               trainable
====== ======================================= ==========================
1      L_cap                                   vision, captioner
2      L_det (captions teacher-forced from gt) detector, fusion
3      lam_cap L_cap + lam_det L_det           everything
4      stage 3 + lam_rl L_rl (SCST)            everything
====== ======================================= ==========================

Each stage starts a fresh optimizer from the previous stage's weights and
writes ``stageN.ckpt`` plus an entry in ``manifest.json``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch

from . import tensor_core as tc
from .captioner import FIRST_WORD, Vocab, caption_ce_loss, greedy_decode, sample_decode, sequence_logprob
from .datagen import DatasetRecord
from .detection import DetLossWeights, detection_loss
from .pipeline import (COMPONENTS, ModelConfig, PanelCapModel, gt_annotations, gt_structured, gt_targets,
                       images_tensor)
from .rewards import RewardWeights, combined_reward, get_aligner, get_text_scorer
from .structured_io import parse_structured

log = logging.getLogger(__name__)

STAGE_FREEZE = {
    1: frozenset({"detector", "fusion"}),
    2: frozenset({"captioner"}),
    3: frozenset(),
    4: frozenset(),
}
# stage -> stages whose checkpoints must exist first
PREREQUISITES = {1: (), 2: (1,), 3: (1, 2), 4: (3,)}

# config-file keys (hyphenated, as in the published hyper-parameter list) -> StageConfig fields
CONFIG_KEYS = {
    "lambda-text-ce": "lambda_cap",
    "lambda-det": "lambda_det",
    "lambda-rl": "lambda_rl",
    "rl-w-bert": "alpha",
    "rl-w-clip": "beta",
    "top-p": "top_p",
    "temperature": "temperature",
    "max-new-tokens-rl": "max_new_tokens_rl",
    "seed": "seed",
    "lr": "lr",
    "steps": "steps",
    "batch-size": "batch_size",
    "gradient-accumulation": "grad_accum",
    "weight-decay": "weight_decay",
    "grad-clip": "grad_clip",
    "warmup": "warmup",
    "reward.text_scorer": "text_scorer",
    "reward.aligner": "aligner",
}
IGNORED_KEYS = ("lora-rank", "lora-alpha", "lora-dropout", "lora-target-modules", "max-seq-len")


# per-stage step budget sized for the synthetic set on one CPU (stage 1-4 in well under 30 min)
DESK_SCHEDULE = {
    1: {"steps": 1200, "lr": 2e-3, "batch-size": 32},
    2: {"steps": 1200, "lr": 1e-3, "batch-size": 32},
    3: {"steps": 200, "lr": 5e-4, "batch-size": 32},
    4: {"steps": 50, "lr": 1e-4, "batch-size": 16},
}


def desk_schedule(stage: int, given: Mapping[str, Any] = ()) -> dict:
    """Schedule keys for ``stage`` that ``given`` does not already set."""
    given = dict(given)
    taken = {CONFIG_KEYS.get(k, k.replace("-", "_")) for k in given}
    return {k: v for k, v in DESK_SCHEDULE[stage].items() if CONFIG_KEYS[k] not in taken}


class StageOrderError(RuntimeError):
    pass


@dataclass
class StageConfig:
    stage: int
    lambda_cap: float = 0.2
    lambda_det: float = 1.0
    lambda_rl: float = 1.0
    alpha: float = 1.0
    beta: float = 0.5
    top_p: float = 0.8
    temperature: float = 0.7
    max_new_tokens_rl: int = 8192
    lr: float = 1e-3
    steps: int = 100
    batch_size: int = 16
    grad_accum: int = 1
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    warmup: int = 20
    seed: int = 42
    text_scorer: str = "unigram_f1"
    aligner: str = "glyph"
    freeze: frozenset = field(default=frozenset(), compare=False)

    def __post_init__(self):
        if self.stage not in STAGE_FREEZE:
            raise ValueError(f"stage must be 1-4, got {self.stage}")
        for name in ("lambda_cap", "lambda_det", "lambda_rl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.steps < 0 or self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and grad_accum >= 1 required")
        RewardWeights(self.alpha, self.beta)
        self.freeze = STAGE_FREEZE[self.stage]

    @property
    def reward_weights(self) -> RewardWeights:
        return RewardWeights(self.alpha, self.beta)

    @classmethod
    def from_mapping(cls, stage: int, values: Mapping[str, Any]) -> "StageConfig":
        """Build from hyphenated config keys (or field names); LoRA keys warn and are dropped."""
        kwargs = {}
        names = {f.name for f in fields(cls)}
        for key, val in values.items():
            if key in IGNORED_KEYS or key.startswith("lora"):
                warnings.warn(f"config key {key!r} has no effect at this scale and is ignored")
                continue
            name = CONFIG_KEYS.get(key, key.replace("-", "_"))
            if name not in names or name in ("stage", "freeze"):
                raise KeyError(f"unknown config key {key!r}")
            kwargs[name] = val
        return cls(stage=stage, **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freeze"] = sorted(self.freeze)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class TrainState:
    model: PanelCapModel
    optimizer: torch.optim.Optimizer | None = None
    step: int = 0
    data_rng: np.random.Generator | None = None
    sample_gen: torch.Generator | None = None
    history: list[dict] = field(default_factory=list)


# -- losses -------------------------------------------------------------------

def scst_loss(sample_logprobs, r_sample: float, r_greedy: float):
    """``-(R_s - R_g) * sum_t log p``; the advantage is a constant, not differentiated."""
    if isinstance(sample_logprobs, torch.Tensor):
        if sample_logprobs.numel() == 0:
            return sample_logprobs.sum() * 0.0
        return -(float(r_sample) - float(r_greedy)) * sample_logprobs.sum()
    if len(sample_logprobs) == 0:
        return 0.0
    return -(float(r_sample) - float(r_greedy)) * math.fsum(sample_logprobs)


def teacher_force_hidden(model: PanelCapModel, images, records: Sequence[DatasetRecord]):
    """Interface features of the ground-truth structured text (with ``[DET]``)."""
    _, _, ifaces = model.teacher_forced(images, [gt_structured(r) for r in records])
    return [(it.h_det, it.h_cap) for it in ifaces]


def batch_det_loss(model: PanelCapModel, images, ifaces, records, w: DetLossWeights = DetLossWeights()):
    logits, boxes = model.detect(images, ifaces)
    total, parts = 0.0, {"cls": 0.0, "bbox": 0.0, "giou": 0.0}
    for b, rec in enumerate(records):
        classes, gt_boxes = gt_targets(rec)
        loss, terms = detection_loss(logits[b], boxes[b], classes, gt_boxes, w)
        total = total + loss
        for k in parts:
            parts[k] += float(terms[k].detach()) / len(records)
    return total / len(records), parts


def figure_reward(model_vocab: Vocab, tokens, record: DatasetRecord, weights: RewardWeights, scorer, aligner) -> float:
    pred = parse_structured(model_vocab.decode(tokens))
    return combined_reward(record.image, pred, gt_annotations(record), weights, scorer, aligner)


def stage_loss(cfg: StageConfig, state: TrainState, records: Sequence[DatasetRecord]):
    """Objective of one micro-batch; terms whose weight is zero are not computed."""
    model = state.model
    images = images_tensor(records)
    out: dict[str, float] = {}
    use_cap = cfg.stage == 1 or (cfg.stage >= 3 and cfg.lambda_cap > 0)
    use_det = cfg.stage == 2 or (cfg.stage >= 3 and cfg.lambda_det > 0)
    use_rl = cfg.stage == 4 and cfg.lambda_rl > 0
    loss = None

    if use_cap or use_det:
        if cfg.stage == 2:
            with torch.no_grad():
                _, _, ifaces = model.teacher_forced(images, [gt_structured(r) for r in records])
        else:
            logits, tgt, ifaces = model.teacher_forced(images, [gt_structured(r) for r in records])
        if use_cap:
            l_cap = caption_ce_loss(logits, tgt)
            out["l_cap"] = l_cap.item()
            loss = l_cap if cfg.stage == 1 else cfg.lambda_cap * l_cap
        if use_det:
            l_det, parts = batch_det_loss(model, images, ifaces, records)
            out["l_det"] = l_det.item()
            out.update({f"det_{k}": v for k, v in parts.items()})
            term = l_det if cfg.stage == 2 else cfg.lambda_det * l_det
            loss = term if loss is None else loss + term

    if use_rl:
        l_rl, rs, rg = _rl_term(cfg, state, images, records)
        out.update(l_rl=l_rl.item(), reward_sample=rs, reward_greedy=rg)
        term = cfg.lambda_rl * l_rl
        loss = term if loss is None else loss + term

    if loss is None:
        raise ValueError(f"stage {cfg.stage}: every loss weight is zero")
    out["loss"] = loss.item()
    return loss, out


def _rl_term(cfg: StageConfig, state: TrainState, images, records):
    model = state.model
    max_new = min(cfg.max_new_tokens_rl, model.config.max_len - 1)
    scorer, aligner = get_text_scorer(cfg.text_scorer), get_aligner(cfg.aligner)
    feats = model.vision(images)
    with torch.no_grad():
        samples = sample_decode(model.captioner, feats.detach(), cfg.top_p, cfg.temperature,
                                state.sample_gen, max_new)
        greedy = greedy_decode(model.captioner, feats.detach(), max_new)
    w = cfg.reward_weights
    r_s = [figure_reward(model.vocab, g.tokens, r, w, scorer, aligner) for g, r in zip(samples, records)]
    r_g = [figure_reward(model.vocab, g.tokens, r, w, scorer, aligner) for g, r in zip(greedy, records)]
    logp = sequence_logprob(model.captioner, feats, [g.tokens for g in samples], cfg.top_p, cfg.temperature)
    adv = torch.tensor([s - g for s, g in zip(r_s, r_g)], dtype=logp.dtype)
    l_rl = -(adv * logp).mean()
    return l_rl, float(np.mean(r_s)), float(np.mean(r_g))


# -- the loop -------------------------------------------------------------------

def apply_freeze(model: PanelCapModel, freeze: frozenset) -> list[torch.nn.Parameter]:
    trainable = []
    for comp in COMPONENTS:
        for p in model.component_parameters(comp).values():
            p.requires_grad_(comp not in freeze)
            if comp not in freeze:
                trainable.append(p)
    return trainable


def _lr_at(cfg: StageConfig, step: int) -> float:
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(cfg.steps - cfg.warmup, 1)
    frac = min(max(step - cfg.warmup, 0) / span, 1.0)
    return cfg.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))


def init_state(model: PanelCapModel, cfg: StageConfig) -> TrainState:
    params = apply_freeze(model, cfg.freeze)
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    # seeded by cfg.seed alone so stage 3 and stage 4 see the same batches
    data_seed, sample_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    gen = torch.Generator().manual_seed(int(sample_seed.generate_state(1)[0]))
    return TrainState(model, opt, 0, np.random.default_rng(data_seed), gen)


def _batches(rng: np.random.Generator, n: int, size: int):
    while True:
        order = rng.permutation(n)
        for s in range(0, n - size + 1 if n >= size else 1, size):
            yield order[s:s + size]


def run_stage(cfg: StageConfig, state: TrainState | PanelCapModel, data: Sequence[DatasetRecord],
              log_path: str | Path | None = None, log_every: int = 10) -> TrainState:
    """Optimise the stage objective for ``cfg.steps`` updates; frozen components never change."""
    if isinstance(state, PanelCapModel):
        state = init_state(state, cfg)
    if not data:
        raise ValueError("run_stage needs training records")
    model = state.model
    model.train()
    trainable = [p for g in state.optimizer.param_groups for p in g["params"]]
    batches = _batches(state.data_rng, len(data), cfg.batch_size)
    fh = open(log_path, "a") if log_path else None
    t0 = time.time()
    try:
        for _ in range(cfg.steps):
            for g in state.optimizer.param_groups:
                g["lr"] = _lr_at(cfg, state.step)
            state.optimizer.zero_grad(set_to_none=True)
            agg: dict[str, float] = {}
            for _ in range(cfg.grad_accum):
                idx = next(batches)
                loss, terms = stage_loss(cfg, state, [data[i] for i in idx])
                tc.backward(loss / cfg.grad_accum)
                for k, v in terms.items():
                    agg[k] = agg.get(k, 0.0) + v / cfg.grad_accum
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
            state.optimizer.step()
            state.step += 1
            row = {"stage": cfg.stage, "step": state.step, "lr": state.optimizer.param_groups[0]["lr"],
                   "time": round(time.time() - t0, 3), **agg}
            state.history.append(row)
            if fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            if log_every and state.step % log_every == 0:
                log.info("stage %d step %d loss %.4f", cfg.stage, state.step, agg["loss"])
    finally:
        if fh:
            fh.close()
    model.eval()
    return state


# -- checkpoints ----------------------------------------------------------------

MANIFEST = "manifest.json"


def ckpt_path(out_dir: str | Path, stage: int) -> Path:
    return Path(out_dir) / f"stage{stage}.ckpt"


def read_manifest(out_dir: str | Path) -> dict:
    p = Path(out_dir) / MANIFEST
    return json.loads(p.read_text()) if p.exists() else {"stages": {}}


def check_prerequisites(out_dir: str | Path, stage: int) -> list[Path]:
    """Paths of the checkpoints ``stage`` starts from; raises when one is missing."""
    manifest = read_manifest(out_dir)
    paths = []
    for s in PREREQUISITES[stage]:
        p = ckpt_path(out_dir, s)
        if str(s) not in manifest["stages"] or not p.exists():
            raise StageOrderError(f"stage {stage} needs {p} (run `panelcap train --stage {s}` first)")
        paths.append(p)
    return paths


def save_stage(out_dir: str | Path, cfg: StageConfig, state: TrainState, extra: Mapping[str, Any] | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = dict(tc.module_tensors(state.model))
    if state.optimizer is not None:
        names = {id(p): n for n, p in state.model.named_parameters()}
        for p, s in state.optimizer.state.items():
            for k in ("exp_avg", "exp_avg_sq"):
                if k in s:
                    tensors[f"optim/{names[id(p)]}/{k}"] = s[k]
    path = ckpt_path(out, cfg.stage)
    tc.save_checkpoint(path, tensors)
    manifest = read_manifest(out)
    manifest["model_config"] = state.model.config_dict()
    manifest["vocab"] = state.model.vocab.itos[FIRST_WORD:]
    manifest["stages"][str(cfg.stage)] = {
        "ckpt": path.name,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "step": state.step,
        "sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
        **(extra or {}),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_model(path: str | Path, manifest_dir: str | Path | None = None) -> PanelCapModel:
    """Rebuild a model from a stage checkpoint (architecture from the manifest next to it)."""
    path = Path(path)
    manifest = read_manifest(manifest_dir or path.parent)
    config = ModelConfig(**manifest.get("model_config", {}))
    vocab = Vocab(manifest["vocab"]) if "vocab" in manifest else None
    model = PanelCapModel(vocab, config)
    tensors = tc.load_checkpoint(path)
    tc.load_module_tensors(model, {k: v for k, v in tensors.items() if not k.startswith("optim/")})
    model.eval()
    return model


def load_stage_start(out_dir: str | Path, stage: int, model: PanelCapModel | None = None) -> PanelCapModel:
    """Starting weights for ``stage``: stage 1 is fresh; 2 takes stage 1; 3 takes the
    captioner of stage 1 and the detector+fusion of stage 2; 4 takes stage 3."""
    paths = check_prerequisites(out_dir, stage)
    if stage == 1:
        return model if model is not None else PanelCapModel()
    if stage == 3:
        cap = tc.load_checkpoint(paths[0])
        det = tc.load_checkpoint(paths[1])
        start = load_model(paths[1])
        keep = {k: (cap[k] if k.split(".", 1)[0] in COMPONENTS["captioner"] else det[k])
                for k in tc.module_tensors(start)}
        tc.load_module_tensors(start, keep)
        return start
    return load_model(paths[-1])


def clone_model(model: PanelCapModel) -> PanelCapModel:
    return copy.deepcopy(model)
