"""Versioned binary container for :class:`~mild.pipeline.TrainedModel`.

Byte layout (all integers little-endian)::

    offset  size  content
    0       8     magic  b"MILDCKPT"
    8       4     uint32 header length H
    12      H     UTF-8 JSON header (sorted keys, no whitespace)
    12+H    P     payload: float64 little-endian arrays, back to back
    12+H+P  32    SHA-256 of bytes [0, 12+H+P)

The header carries ``format_version``, ``config_hash`` (SHA-256 of the
canonical config JSON), ``created`` (integer seconds, taken from
``SOURCE_DATE_EPOCH`` when set and 0 otherwise so that identical runs give
identical files), the training config, network/HSMM metadata and an
``arrays`` manifest of ``{name, shape, offset}`` entries into the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from mild.errors import CorruptChecksum, IoFailure, VersionMismatch
from mild.gauss import BlockSplit, MultivariateGaussian
from mild.hsmm import HsmmModel
from mild.nnet import Dense, DenseNet
from mild.pipeline import TrainConfig, TrainedModel
from mild.vae import VaeAgent, VaePair

MAGIC = b"MILDCKPT"
FORMAT_VERSION = 1
NETS = ("trunk", "mean_head", "tri_head", "decoder")


def _created() -> int:
    try:
        return int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    except ValueError:
        return 0


class _Payload:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.manifest: list[dict] = []
        self.offset = 0

    def add(self, name: str, arr) -> None:
        a = np.ascontiguousarray(arr, dtype="<f8")
        raw = a.tobytes()
        self.manifest.append({"name": name, "shape": list(a.shape), "offset": self.offset})
        self.chunks.append(raw)
        self.offset += len(raw)


def _net_meta(net: DenseNet) -> dict:
    return {"leaky_slope": net.leaky_slope, "activations": [l.activation for l in net.layers]}


def to_bytes(model: TrainedModel) -> bytes:
    payload = _Payload()
    agents = {}
    shared = model.vae.agent2 is model.vae.agent1
    for key in ("agent1",) if shared else ("agent1", "agent2"):
        agent: VaeAgent = getattr(model.vae, key)
        meta = {"input_dim": agent.input_dim, "latent_dim": agent.latent_dim, "hidden": list(agent.hidden), "nets": {}}
        for net_name in NETS:
            net = getattr(agent, net_name)
            meta["nets"][net_name] = _net_meta(net)
            for i, layer in enumerate(net.layers):
                payload.add(f"{key}.{net_name}.{i}.weight", layer.weight)
                payload.add(f"{key}.{net_name}.{i}.bias", layer.bias)
        agents[key] = meta
    hsmms = {}
    for label in sorted(model.hsmms):
        h = model.hsmms[label]
        hsmms[label] = {
            "K": h.K,
            "d_max": h.d_max,
            "dur_floor": h.dur_floor,
            "reg": h.reg,
            "split": [list(h.split.first_dims), list(h.split.second_dims)],
        }
        payload.add(f"hsmm.{label}.pi", h.pi)
        payload.add(f"hsmm.{label}.trans", h.trans)
        payload.add(f"hsmm.{label}.means", np.stack([g.mean for g in h.components]))
        payload.add(f"hsmm.{label}.chols", np.stack([g.chol for g in h.components]))
        payload.add(f"hsmm.{label}.dur_mean", h.dur_mean)
        payload.add(f"hsmm.{label}.dur_std", h.dur_std)
    header = {
        "format_version": FORMAT_VERSION,
        "config_hash": model.config.digest(),
        "created": _created(),
        "config": model.config.to_dict(),
        "frame_dims": list(model.frame_dims),
        "shared_weights": shared,
        "agents": agents,
        "hsmms": hsmms,
        "arrays": payload.manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(head)) + head + b"".join(payload.chunks)
    return body + hashlib.sha256(body).digest()


def save(model: TrainedModel, path) -> None:
    data = to_bytes(model)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def read_header(data: bytes) -> tuple[dict, memoryview]:
    if len(data) < len(MAGIC) + 4 + 32:
        raise CorruptChecksum("checkpoint is truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptChecksum("checkpoint checksum does not match its contents")
    if body[:8] != MAGIC:
        raise CorruptChecksum("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<I", body[8:12])
    header = json.loads(body[12 : 12 + n].decode("utf-8"))
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    return header, memoryview(body)[12 + n :]


def from_bytes(data: bytes) -> TrainedModel:
    header, payload = read_header(data)
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        a = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = a.reshape(entry["shape"]).astype(float)

    def agent(key: str) -> VaeAgent:
        meta = header["agents"][key]
        nets = {}
        for net_name in NETS:
            nm = meta["nets"][net_name]
            layers = [
                Dense(arrays[f"{key}.{net_name}.{i}.weight"], arrays[f"{key}.{net_name}.{i}.bias"], act)
                for i, act in enumerate(nm["activations"])
            ]
            nets[net_name] = DenseNet(layers, nm["leaky_slope"])
        return VaeAgent(meta["input_dim"], meta["latent_dim"], meta["hidden"], nets=nets)

    a1 = agent("agent1")
    vae = VaePair(a1, a1 if header["shared_weights"] else agent("agent2"))
    hsmms = {}
    for label, meta in header["hsmms"].items():
        p = f"hsmm.{label}."
        comps = [MultivariateGaussian(m, c) for m, c in zip(arrays[p + "means"], arrays[p + "chols"])]
        hsmms[label] = HsmmModel(
            pi=arrays[p + "pi"],
            trans=arrays[p + "trans"],
            components=comps,
            dur_mean=arrays[p + "dur_mean"],
            dur_std=arrays[p + "dur_std"],
            d_max=meta["d_max"],
            split=BlockSplit(*meta["split"]),
            dur_floor=meta["dur_floor"],
            reg=meta["reg"],
        )
    config = TrainConfig.from_dict(header["config"])
    return TrainedModel(vae, hsmms, config, tuple(header["frame_dims"]))


def load(path) -> TrainedModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(data)
