"""Binary model files.

Layout (all integers little-endian):

    magic "FSRMODEL" | version u32 | section count u32 | sections...
    section: name_len u16 | name utf-8 | payload_len u64 | crc32 u32 | payload

Sections: "config" (JSON), then array groups "shape", "templates",
"regressors", "nets", "priors". Array groups are flat key -> ndarray maps;
keys encode the structure ("net0.common.w3" etc.). Serialization is
deterministic -- the same model always produces the same bytes -- so file
checksums can stand in for model identity.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib

import numpy as np

from .cascade import CascadeConfig, CascadeModel, _stage_net_config
from .errors import DataError
from .gatednet import GatedSRNet, TrainSchedule
from .geometry import MeanTemplate, ShapeModel
from .prior import PriorConfig
from .regressor import FeatureConfig, RegressorConfig, StageRegressor

MAGIC = b"FSRMODEL"
VERSION = 1


# --------------------------------------------------------------- packing

def _pack_array(key, arr):
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<").str.encode()
    key_b = key.encode()
    head = struct.pack("<H", len(key_b)) + key_b
    head += struct.pack("<B", len(dt)) + dt
    head += struct.pack("<B", arr.ndim)
    head += b"".join(struct.pack("<Q", d) for d in arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<")).tobytes()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise DataError("truncated model file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    @property
    def exhausted(self):
        return self.pos == len(self.data)


def _pack_group(arrays):
    """arrays: list of (key, ndarray) in a fixed order."""
    return struct.pack("<I", len(arrays)) + b"".join(
        _pack_array(k, a) for k, a in arrays)


def _unpack_group(payload):
    r = _Reader(payload)
    count = r.unpack("<I")
    out = {}
    for _ in range(count):
        key = r.take(r.unpack("<H")).decode()
        dt = np.dtype(r.take(r.unpack("<B")).decode())
        ndim = r.unpack("<B")
        shape = tuple(r.unpack("<Q") for _ in range(ndim))
        n_bytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        out[key] = np.frombuffer(r.take(n_bytes), dtype=dt).reshape(shape).copy()
    if not r.exhausted:
        raise DataError("trailing bytes in model section")
    return out


def _sections_to_bytes(sections):
    blob = MAGIC + struct.pack("<II", VERSION, len(sections))
    for name, payload in sections:
        name_b = name.encode()
        blob += struct.pack("<H", len(name_b)) + name_b
        blob += struct.pack("<QI", len(payload), zlib.crc32(payload))
        blob += payload
    return blob


def _bytes_to_sections(data):
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise DataError("not a model file (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise DataError(f"unsupported model version {version}")
    sections = {}
    for _ in range(count):
        name = r.take(r.unpack("<H")).decode()
        length, crc = r.unpack("<QI")
        payload = r.take(length)
        if zlib.crc32(payload) != crc:
            raise DataError(f"model section '{name}' failed its checksum")
        sections[name] = payload
    if not r.exhausted:
        raise DataError("trailing bytes after last model section")
    return sections


# ------------------------------------------------------------ model <-> file

def _config_json(cfg: CascadeConfig):
    return json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()


def _config_from_json(payload):
    d = json.loads(payload.decode())
    try:
        d["prior"] = PriorConfig(**d["prior"])
        reg = d["regressor"]
        reg["feature"] = FeatureConfig(**reg["feature"])
        d["regressor"] = RegressorConfig(**reg)
        d["schedule"] = TrainSchedule(**d["schedule"])
        return CascadeConfig(**d)
    except TypeError as e:
        raise DataError(f"model config does not match this build: {e}") from None


def _template_arrays(i, t: MeanTemplate):
    pre = f"tpl{i}."
    out = [(pre + "px_iod", np.array([t.px_iod])),
           (pre + "mask", t.mask),
           (pre + "mean_landmarks", t.mean_landmarks),
           (pre + "landmark_basis", t.landmark_basis),
           (pre + "dense_basis", t.dense_basis)]
    if t.eye_left is not None:
        out.append((pre + "eye_left", t.eye_left))
        out.append((pre + "eye_right", t.eye_right))
    return out


def _template_from(arrays, i):
    pre = f"tpl{i}."
    return MeanTemplate(px_iod=float(arrays[pre + "px_iod"][0]),
                        mask=arrays[pre + "mask"],
                        mean_landmarks=arrays[pre + "mean_landmarks"],
                        landmark_basis=arrays[pre + "landmark_basis"],
                        dense_basis=arrays[pre + "dense_basis"],
                        eye_left=arrays.get(pre + "eye_left"),
                        eye_right=arrays.get(pre + "eye_right"))


def _net_arrays(i, net: GatedSRNet):
    out = []
    for part in ("common", "hf", "gate"):
        stack = getattr(net, part)
        for j, conv in enumerate(stack.layers):
            out.append((f"net{i}.{part}.w{j}", conv.weight.data))
            out.append((f"net{i}.{part}.b{j}", conv.bias.data))
    return out


def _fill_net(net: GatedSRNet, arrays, i):
    for part in ("common", "hf", "gate"):
        stack = getattr(net, part)
        for j, conv in enumerate(stack.layers):
            w = arrays[f"net{i}.{part}.w{j}"]
            b = arrays[f"net{i}.{part}.b{j}"]
            if w.shape != conv.weight.data.shape:
                raise DataError(f"net{i}.{part}.w{j}: stored shape {w.shape} "
                                f"does not match configured "
                                f"{conv.weight.data.shape}")
            conv.weight.data = w
            conv.bias.data = b


def dumps_model(model: CascadeModel):
    cfg = model.config
    sm = model.shape_model
    shape_arrays = [("mean", sm.mean), ("basis", sm.basis),
                    ("eigvals", sm.eigvals)]
    tpl_arrays = [pair for i, t in enumerate(model.templates)
                  for pair in _template_arrays(i, t)]
    reg_arrays = []
    for i, reg in enumerate(model.regressors):
        reg_arrays += [(f"reg{i}.phi_bar", reg.phi_bar),
                       (f"reg{i}.jacobian", reg.jacobian),
                       (f"reg{i}.matrix", reg.matrix)]
    net_arrays = [pair for i, net in enumerate(model.nets)
                  for pair in _net_arrays(i, net)]
    gates = [(-1.0 if net.force_gate is None else float(net.force_gate))
             for net in model.nets]
    net_arrays.append(("force_gates", np.array(gates)))
    prior_arrays = [(f"prior{i}", p) for i, p in enumerate(model.priors)]

    sections = [("config", _config_json(cfg)),
                ("shape", _pack_group(shape_arrays)),
                ("templates", _pack_group(tpl_arrays)),
                ("regressors", _pack_group(reg_arrays)),
                ("nets", _pack_group(net_arrays)),
                ("priors", _pack_group(prior_arrays))]
    return _sections_to_bytes(sections)


def loads_model(data):
    sections = _bytes_to_sections(data)
    for name in ("config", "shape", "templates", "regressors", "nets",
                 "priors"):
        if name not in sections:
            raise DataError(f"model file is missing section '{name}'")
    cfg = _config_from_json(sections["config"])
    shape = _unpack_group(sections["shape"])
    sm = ShapeModel(mean=shape["mean"], basis=shape["basis"],
                    eigvals=shape["eigvals"])
    tpl = _unpack_group(sections["templates"])
    templates = [_template_from(tpl, i) for i in range(cfg.n_stages + 1)]
    reg = _unpack_group(sections["regressors"])
    regressors = []
    i = 0
    while f"reg{i}.matrix" in reg:
        regressors.append(StageRegressor(phi_bar=reg[f"reg{i}.phi_bar"],
                                         jacobian=reg[f"reg{i}.jacobian"],
                                         matrix=reg[f"reg{i}.matrix"]))
        i += 1
    nets_arrays = _unpack_group(sections["nets"])
    gates = nets_arrays["force_gates"]
    rng = np.random.default_rng(0)   # placeholder init, overwritten below
    nets = []
    for i in range(cfg.n_stages):
        net = GatedSRNet(_stage_net_config(cfg, i), rng)
        _fill_net(net, nets_arrays, i)
        net.force_gate = None if gates[i] < 0 else float(gates[i])
        nets.append(net)
    priors_g = _unpack_group(sections["priors"])
    priors = [priors_g[f"prior{i}"] for i in range(cfg.n_stages)]
    return CascadeModel(config=cfg, shape_model=sm, templates=templates,
                        regressors=regressors, nets=nets, priors=priors)


def save_model(model, path):
    data = dumps_model(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_model(path):
    with open(path, "rb") as fh:
        return loads_model(fh.read())
