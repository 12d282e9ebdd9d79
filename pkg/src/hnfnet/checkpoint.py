"""Parameter checkpoints: a zip archive of raw little-endian f32 tensors plus a JSON manifest."""
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .network import NetworkConfig, build

FORMAT_VERSION = 1


def _state(net):
    named = [(n, p, "parameter") for n, p in net.named_parameters()]
    named += [(n, b, "buffer") for n, b in net.named_buffers()]
    return named


def save_checkpoint(net, path, extra=None):
    path = Path(path)
    entries = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, t, kind in _state(net):
            arr = t.detach().cpu().numpy().astype("<f4")
            zf.writestr(f"tensors/{name}.f32", arr.tobytes(order="C"))
            entries.append({"name": name, "shape": list(arr.shape), "kind": kind})
        manifest = {
            "format_version": FORMAT_VERSION,
            "config": net.config.to_dict(),
            "config_hash": net.config.config_hash(),
            "tensors": entries,
            "extra": extra or {},
        }
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_manifest(path):
    try:
        with zipfile.ZipFile(path) as zf:
            return json.loads(zf.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError) as e:
        raise CheckpointError(f"{path}: not a checkpoint archive ({e})") from e


def load_checkpoint(path, net=None):
    """Restore parameters and buffers; builds the network from the manifest if ``net`` is None."""
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
    config = NetworkConfig.from_dict(manifest["config"])
    if config.config_hash() != manifest["config_hash"]:
        raise CheckpointError(f"{path}: manifest config does not match its hash")
    if net is None:
        net = build(config)
    elif net.config.config_hash() != manifest["config_hash"]:
        raise CheckpointError(f"{path}: checkpoint was written for a different network config")
    state = {n: t for n, t, _ in _state(net)}
    listed = {e["name"] for e in manifest["tensors"]}
    if listed != set(state):
        missing = sorted(set(state) - listed)[:5]
        raise CheckpointError(f"{path}: tensor set mismatch (missing e.g. {missing})")
    with zipfile.ZipFile(path) as zf, torch.no_grad():
        for e in manifest["tensors"]:
            t = state[e["name"]]
            if list(t.shape) != e["shape"]:
                raise CheckpointError(f"{path}: {e['name']} has shape {e['shape']}, network expects {list(t.shape)}")
            try:
                raw = zf.read(f"tensors/{e['name']}.f32")
            except KeyError as err:
                raise CheckpointError(f"{path}: payload for {e['name']} is missing") from err
            if len(raw) != 4 * int(np.prod(e["shape"])):
                raise CheckpointError(f"{path}: payload for {e['name']} has {len(raw)} bytes")
            arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"])
            t.copy_(torch.from_numpy(arr.astype(np.float32)))
    return net
