"""Write toy checkpoints (or remapped pretrained state dicts) into the STRV
weight container, embedding the export manifest: per-tensor crc32
checksums, reference logits on a seed-derived input, and the held-out
accuracy. The consuming runtime re-verifies all of it."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from . import strv
from .refinput import reference_input
from .toyvit import ToyConfig, ToyViT, export_tensors


class ConversionError(RuntimeError):
    pass


@torch.no_grad()
def _reference_logits(model: ToyViT, input_seed: int) -> list[float]:
    image = reference_input(model.config.image_size, input_seed)
    logits = model(torch.from_numpy(image).unsqueeze(0))[0]
    return [float(v) for v in logits]


def export_strv(
    path,
    model: ToyViT,
    accuracy: float | None = None,
    input_seed: int = 1,
) -> dict:
    """Export weights plus manifest; returns the manifest written."""
    model.eval()
    tensors = export_tensors(model)
    manifest = {
        "checksums": {name: strv.tensor_crc32(arr) for name, arr in tensors.items()},
        "reference": {"input_seed": int(input_seed), "logits": _reference_logits(model, input_seed)},
    }
    if accuracy is not None:
        manifest["accuracy"] = float(accuracy)
    strv.write(path, tensors, {"config": model.config.to_metadata(), "manifest": manifest})
    return manifest


def _resolve_source(state: dict, spec, our_name: str) -> np.ndarray:
    if isinstance(spec, str):
        if spec not in state:
            raise ConversionError(f"checkpoint lacks tensor {spec!r} (mapped to {our_name})")
        return state[spec].detach().cpu().float().numpy()
    try:
        source = spec["source"]
        row_slice = spec.get("row_slice")
    except (TypeError, KeyError) as exc:
        raise ConversionError(f"bad map entry for {our_name}: {spec!r}") from exc
    if source not in state:
        raise ConversionError(f"checkpoint lacks tensor {source!r} (mapped to {our_name})")
    arr = state[source].detach().cpu().float().numpy()
    if row_slice is not None:
        arr = arr[int(row_slice[0]) : int(row_slice[1])]
    return arr


def convert_pretrained(checkpoint_path, config: ToyConfig, name_map: dict, out_path) -> None:
    """Remap a plain pre-norm ViT state dict onto the runtime's tensor
    names and write the container.

    name_map maps each runtime tensor name either to a source tensor name
    or to {"source": name, "row_slice": [a, b]} for fused projections that
    need splitting (e.g. combined qkv weights). Patch-embedding conv
    weights are flattened automatically.
    """
    state = torch.load(checkpoint_path, map_location="cpu", weights_only=False)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]

    template = ToyViT(config)
    expected = export_tensors(template)
    tensors = {}
    for our_name, shape in ((k, v.shape) for k, v in expected.items()):
        if our_name not in name_map:
            raise ConversionError(f"name map lacks an entry for {our_name}")
        arr = _resolve_source(state, name_map[our_name], our_name)
        if our_name == "patch_embed.weight" and arr.ndim == 4:
            arr = arr.reshape(arr.shape[0], -1)
        arr = np.squeeze(arr) if arr.shape != shape and np.squeeze(arr).shape == shape else arr
        if arr.shape != shape:
            raise ConversionError(
                f"tensor {our_name}: converted shape {arr.shape} != expected {tuple(shape)}"
            )
        tensors[our_name] = arr.astype(np.float32)

    manifest = {"checksums": {name: strv.tensor_crc32(arr) for name, arr in tensors.items()}}
    strv.write(out_path, tensors, {"config": config.to_metadata(), "manifest": manifest})


def load_name_map(path) -> dict:
    return json.loads(Path(path).read_text())


def identity_name_map(config: ToyConfig) -> dict:
    """Map from runtime names to the toy model's own state-dict names."""
    mapping = {
        "patch_embed.weight": "patch_embed.weight",
        "patch_embed.bias": "patch_embed.bias",
        "cls_token": "cls_token",
        "pos_embed": "pos_embed",
        "final_ln.weight": "final_ln.weight",
        "final_ln.bias": "final_ln.bias",
        "head.weight": "head.weight",
        "head.bias": "head.bias",
    }
    for i in range(config.num_layers):
        ours = f"blocks.{i}."
        mapping[ours + "ln1.weight"] = ours + "ln1.weight"
        mapping[ours + "ln1.bias"] = ours + "ln1.bias"
        for proj in ("q", "k", "v", "out"):
            mapping[ours + f"attn.{proj}.weight"] = ours + f"attn.{proj}.weight"
            mapping[ours + f"attn.{proj}.bias"] = ours + f"attn.{proj}.bias"
        mapping[ours + "ln2.weight"] = ours + "ln2.weight"
        mapping[ours + "ln2.bias"] = ours + "ln2.bias"
        mapping[ours + "mlp.fc1.weight"] = ours + "mlp.0.weight"
        mapping[ours + "mlp.fc1.bias"] = ours + "mlp.0.bias"
        mapping[ours + "mlp.fc2.weight"] = ours + "mlp.2.weight"
        mapping[ours + "mlp.fc2.bias"] = ours + "mlp.2.bias"
    return mapping
