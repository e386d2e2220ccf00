"""The joint model: captioner -> ``[DET]`` interface -> gated fusion -> detector."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import tensor_core as tc
from .captioner import (CaptionModel, Interface, Vocab, batch_interface, extract_interface,
                        greedy_decode, targets_for)
from .datagen import IMAGE_SIZE, DatasetRecord, caption_vocabulary
from .detection import BoxN, DetectionHead, PanelAnnotation, detections_to_json, label_to_class, to_detections
from .fusion import FusionInputs, GatedFusion
from .layers import VisionEncoder
from .structured_io import StructuredOutput


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_heads: int = 4
    n_queries: int = 30
    patch: int = 16
    max_len: int = 104  # 8 hard-variant lines of 12 tokens + [DET] + EOS = 98
    caption_layers: int = 2
    decoder_layers: int = 2
    vision_layers: int = 0
    detector_vision_layers: int = 1


# checkpoint name prefixes per trainable component
COMPONENTS = {
    "captioner": ("vision", "captioner"),
    "detector": ("detector",),
    "fusion": ("fusion",),
}


class PanelCapModel(nn.Module):
    def __init__(self, vocab: Vocab | None = None, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.vocab = vocab or Vocab(caption_vocabulary())
        self.config = config
        c = config
        self.vision = VisionEncoder(c.d, IMAGE_SIZE, c.patch, c.vision_layers, c.n_heads)
        self.captioner = CaptionModel(len(self.vocab), c.d, c.n_heads, c.caption_layers, c.max_len)
        self.fusion = GatedFusion(c.d, c.n_heads)
        self.detector = DetectionHead(c.d, c.n_queries, c.n_heads, c.decoder_layers, IMAGE_SIZE, c.patch,
                                     c.detector_vision_layers)

    def component_parameters(self, component: str) -> dict[str, nn.Parameter]:
        prefixes = COMPONENTS[component]
        return {n: p for n, p in self.named_parameters() if n.split(".", 1)[0] in prefixes}

    def config_dict(self) -> dict:
        return asdict(self.config)

    # -- captioning ---------------------------------------------------------
    def teacher_forced(self, images, outputs: Sequence[StructuredOutput]):
        """One teacher-forced pass; returns logits, targets and interface tensors."""
        inp, tgt = targets_for(self.vocab, outputs, self.config.max_len)
        logits, hidden = self.captioner(inp, self.vision(images))
        # hidden[:, j] is the state with input inp[:, j]; generated token y_t sits at input index t + 1
        gen_hidden = hidden[:, 1:]
        ifaces = []
        for b in range(len(outputs)):
            toks = tgt[b, :-1].tolist()
            ifaces.append(extract_interface(toks, gen_hidden[b]))
        return logits, tgt, ifaces

    # -- detection ----------------------------------------------------------
    def detect(self, images, interfaces: Sequence[Interface]):
        h_det, h_cap, mask = batch_interface(interfaces)
        b = images.shape[0]
        q = self.detector.queries[None].expand(b, -1, -1)
        fused = self.fusion(FusionInputs(q, h_det, h_cap, mask))
        return self.detector.decode(self.detector.backbone(images), fused)

    @torch.no_grad()
    def generate(self, images, max_new_tokens: int | None = None):
        max_new = self.config.max_len - 1 if max_new_tokens is None else max_new_tokens
        return greedy_decode(self.captioner, self.vision(images), max_new)


def images_tensor(records: Sequence[DatasetRecord]):
    return torch.from_numpy(np.stack([r.image for r in records]).astype(np.float32) / 255.0)


def gt_structured(record: DatasetRecord) -> StructuredOutput:
    return StructuredOutput.from_pairs(((p["label"], p["caption"]) for p in record.panels), True)


def gt_annotations(record: DatasetRecord) -> list[PanelAnnotation]:
    return [PanelAnnotation(p["label"], BoxN.from_xyxy(p["bbox_xyxy"]), p["caption"]) for p in record.panels]


def gt_targets(record: DatasetRecord):
    anns = gt_annotations(record)
    classes = torch.tensor([label_to_class(a.label) for a in anns], dtype=torch.long)
    boxes = torch.tensor([a.box.as_tuple() for a in anns], dtype=torch.float32).reshape(-1, 4)
    return classes, boxes


@torch.no_grad()
def infer(model: PanelCapModel, records: Sequence[DatasetRecord], batch_size: int = 50,
          gate: bool = True) -> list[dict]:
    """Greedy captions then caption-conditioned detection for every record.

    Returns ``{"figure_id", "raw_output", "detections", "det_found"}`` dicts.
    """
    model.eval()
    prev_gate = model.fusion.gate_enabled
    model.fusion.gate_enabled = gate
    out = []
    try:
        for s in range(0, len(records), batch_size):
            chunk = records[s:s + batch_size]
            images = images_tensor(chunk)
            gens = model.generate(images)
            ifaces = [extract_interface(g.tokens, g.hidden) for g in gens]
            logits, boxes = model.detect(images, ifaces)
            for rec, g, it, lg, bx in zip(chunk, gens, ifaces, logits, boxes):
                dets = to_detections(lg, bx)
                out.append({"figure_id": rec.figure_id, "raw_output": model.vocab.decode(g.tokens),
                            "detections": detections_to_json(dets), "det_found": it.det_found})
    finally:
        model.fusion.gate_enabled = prev_gate
    return out


def evaluate_model(model: PanelCapModel, records: Sequence[DatasetRecord], batch_size: int = 50,
                   gate: bool = True, reward_weights=None) -> dict:
    """Detection mAP, caption metrics, parse rate and mean reward on ``records``."""
    from .detection import compute_map, detections_from_json
    from .eval_protocol import evaluate_captions
    from .rewards import RewardWeights, combined_reward
    from .structured_io import parse_structured

    preds = infer(model, records, batch_size, gate)
    m, m50 = compute_map([detections_from_json(p["detections"]) for p in preds],
                         [gt_annotations(r) for r in records])
    report = evaluate_captions({r.figure_id: [(p["label"], p["caption"]) for p in r.panels] for r in records},
                               {p["figure_id"]: p["raw_output"] for p in preds})
    parsed = [parse_structured(p["raw_output"]) for p in preds]
    parse_ok = sum(bool(s.lines) and s.det_terminated for s in parsed)
    w = reward_weights or RewardWeights()
    reward = float(np.mean([combined_reward(r.image, s, gt_annotations(r), w) for r, s in zip(records, parsed)]))
    return {"map": m, "map50": m50, **report.dataset, "parse_rate": parse_ok / len(records),
            "reward": reward, "predictions": preds}
