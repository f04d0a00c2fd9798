"""Model + optimizer state on disk, built on the float32 array container."""

from __future__ import annotations

import hashlib
import shutil
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .autodiff import load_arrays, save_arrays
from .text import TextVocab
from .unet import UNet, UNetConfig


class MissingArtifact(FileNotFoundError):
    pass


def unet_config_to_dict(cfg: UNetConfig) -> dict:
    d = asdict(cfg)
    d["channels"] = list(cfg.channels)
    d["roster"] = cfg.roster_string()
    return d


def unet_config_from_dict(d: dict) -> UNetConfig:
    d = dict(d)
    d["channels"] = tuple(d["channels"])
    d["roster"] = UNetConfig.parse_roster(d["roster"])
    return UNetConfig(**d)


def model_arrays(unet: UNet, vocab: TextVocab) -> dict[str, torch.Tensor]:
    out = {f"unet.{k}": v for k, v in unet.state_dict().items()}
    out["text.table"] = vocab.table
    out["text.vstar"] = vocab.vstar
    return out


def save_checkpoint(path: str | Path, unet: UNet, vocab: TextVocab, meta: dict,
                    optimizer: torch.optim.Optimizer | None = None,
                    param_names: dict[int, str] | None = None) -> Path:
    """Write atomically: stage into a sibling directory, then swap it in."""
    path = Path(path)
    arrays = model_arrays(unet, vocab)
    meta = dict(meta, unet=unet_config_to_dict(unet.cfg), text_dim=vocab.dim)
    if optimizer is not None:
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if st:
                    name = param_names[id(p)]
                    arrays[f"adam.m.{name}"] = st["exp_avg"]
                    arrays[f"adam.v.{name}"] = st["exp_avg_sq"]
                    arrays[f"adam.step.{name}"] = st["step"].reshape(1)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    save_arrays(tmp, arrays, meta)
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[UNet, TextVocab, dict, dict[str, np.ndarray]]:
    """Rebuild the model; also returns any stored optimizer moments."""
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise MissingArtifact(f"no checkpoint at {path}")
    arrays, meta = load_arrays(path)
    unet = UNet(unet_config_from_dict(meta["unet"]))
    vocab = TextVocab(dim=meta.get("text_dim", unet.cfg.text_dim))
    state = {k[len("unet."):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("unet.")}
    unet.load_state_dict(state)
    with torch.no_grad():
        vocab.table.copy_(torch.from_numpy(arrays["text.table"]))
        vocab.vstar.copy_(torch.from_numpy(arrays["text.vstar"]))
    moments = {k: v for k, v in arrays.items() if k.startswith("adam.")}
    return unet, vocab, meta, moments


def restore_optimizer(optimizer: torch.optim.Optimizer, moments: dict[str, np.ndarray],
                      named: dict[str, torch.nn.Parameter]) -> None:
    for name, p in named.items():
        m, v = moments.get(f"adam.m.{name}"), moments.get(f"adam.v.{name}")
        if m is None or v is None:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(moments[f"adam.step.{name}"][0])),
            "exp_avg": torch.from_numpy(m.copy()),
            "exp_avg_sq": torch.from_numpy(v.copy()),
        }


def tensor_hash(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(tensors):
        h.update(k.encode())
        h.update(tensors[k].detach().cpu().numpy().tobytes())
    return h.hexdigest()
