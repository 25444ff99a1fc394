"""Parameter-efficient fine-tuning: which parameters stay trainable."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass

from torch import nn


@dataclass
class PeftPolicy:
    train_cross_attention: bool = True
    train_self_attention_out_proj: bool = True
    train_codec_last_k_layers: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


_CROSS = re.compile(r"(^|\.)attn2\.")
_SELF_OUT = re.compile(r"(^|\.)attn1\.to_out\.")
_ENC = re.compile(r"^codec\.encoder\.(\d+)\.")


def peft_mask(model: nn.Module, policy: PeftPolicy) -> dict[str, bool]:
    """Map every named parameter to True (trainable) or False (frozen) under ``policy``.

    Trainable: all cross-attention parameters, self-attention output projections and the
    last ``k`` codec encoder layers. Everything else is frozen.
    """
    names = [n for n, _ in model.named_parameters()]
    enc_layers = sorted({int(m.group(1)) for n in names if (m := _ENC.match(n))})
    k = max(policy.train_codec_last_k_layers, 0)
    last_k = set(enc_layers[len(enc_layers) - k:]) if k else set()

    mask = {}
    for n in names:
        m = _ENC.match(n)
        mask[n] = bool(
            (policy.train_cross_attention and _CROSS.search(n))
            or (policy.train_self_attention_out_proj and _SELF_OUT.search(n))
            or (m and int(m.group(1)) in last_k)
        )
    if not any(mask.values()):
        raise ValueError(f"PEFT policy {policy} leaves no trainable parameters")
    return mask


def apply_mask(model: nn.Module, mask: dict[str, bool]) -> list[nn.Parameter]:
    """Set ``requires_grad`` from ``mask`` and return the trainable parameters."""
    trainable = []
    for n, p in model.named_parameters():
        p.requires_grad_(mask[n])
        if mask[n]:
            trainable.append(p)
    return trainable


def trainable_fraction(model: nn.Module, mask: dict[str, bool]) -> float:
    params = dict(model.named_parameters())
    total = sum(p.numel() for p in params.values())
    return sum(params[n].numel() for n, on in mask.items() if on) / total
