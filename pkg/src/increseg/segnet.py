"""Encoder-decoder segmentation network with per-class sigmoid heads.

The encoder is the 13-convolution VGG16 column (widths scaled by
``width_scale``), followed by two center convolutions at the deepest width
and a mirrored decoder. Each pooling output feeds the decoder: pools 1-4 are
concatenated with the deconvolution output at the matching resolution, pool 5
feeds the center convolutions. Every conv/deconv is followed by a ReLU except
the per-class head convolutions, whose logits go through a sigmoid outside
the parameter stack.

Parameters live in a flat name -> array map, with one (w, b) pair per class
head, so freezing and classifier expansion operate on whole named tensors.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import ClassSet
from . import nnops

BASE_WIDTHS = (64, 128, 256, 512, 512)
ENC_CONVS = (2, 2, 3, 3, 3)  # VGG16 convolutions per stage
DEC_CONVS = {5: 3, 4: 3, 3: 3, 2: 2, 1: 2}  # mirrored
POOL_FACTOR = 2 ** len(BASE_WIDTHS)

CHECKPOINT_MAGIC = b"ISEGNET1"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Checkpoint bytes do not match the container format."""


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int
    class_set: ClassSet
    width_scale: float = 1.0

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        for base in BASE_WIDTHS:
            if int(round(base * self.width_scale)) < 1:
                raise ValueError(
                    f"width_scale {self.width_scale} yields 0 filters for base {base}"
                )

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(int(round(b * self.width_scale)) for b in BASE_WIDTHS)


@dataclass(frozen=True)
class FreezeMask:
    """Names of the parameters an optimizer step may touch."""

    trainable: frozenset[str]

    @staticmethod
    def of(names) -> "FreezeMask":
        return FreezeMask(frozenset(names))


@dataclass
class SegNetwork:
    params: dict[str, np.ndarray]
    spec: NetworkSpec
    mode: str = "trainable"  # "trainable" | "frozen-memory"
    stage_history: list[dict] = field(default_factory=list)

    @property
    def class_set(self) -> ClassSet:
        return self.spec.class_set

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def forward(self, batch, output="probabilities"):
        return forward(self, batch, output=output)

    def freeze_copy(self) -> "SegNetwork":
        return SegNetwork(
            params={k: v.copy() for k, v in self.params.items()},
            spec=self.spec,
            mode="frozen-memory",
            stage_history=[dict(h) for h in self.stage_history],
        )


def layer_table(spec: NetworkSpec) -> list[tuple[str, str, int, int]]:
    """Ordered (name, kind, in_channels, out_channels) for every parameterized
    layer; kind is "conv" or "deconv"."""
    w = spec.widths
    table = []
    cin = spec.in_channels
    for i, n_convs in enumerate(ENC_CONVS, start=1):
        for j in range(1, n_convs + 1):
            table.append((f"enc{i}_conv{j}", "conv", cin, w[i - 1]))
            cin = w[i - 1]
    table.append(("center_conv1", "conv", w[4], w[4]))
    table.append(("center_conv2", "conv", w[4], w[4]))
    cin = w[4]
    for i in (5, 4, 3, 2, 1):
        cout = w[i - 2] if i >= 2 else w[0]
        table.append((f"dec{i}_up", "deconv", cin, cout))
        cin = cout + (w[i - 2] if i > 1 else 0)  # concat with pool i-1 output
        for j in range(1, DEC_CONVS[i] + 1):
            table.append((f"dec{i}_conv{j}", "conv", cin, cout))
            cin = cout
    for cls in spec.class_set:
        table.append((f"head.{cls}", "conv", w[0], 1))
    return table


def _init_layer(rng, kind, cin, cout, dtype):
    k = 3 if kind == "conv" else 2
    fan_in, fan_out = cin * k * k, cout * k * k
    if kind == "conv":
        w = nnops.xavier_uniform(rng, (k, k, cin, cout), fan_in, fan_out, dtype)
    else:
        w = nnops.xavier_uniform(rng, (cin, cout, k, k), fan_in, fan_out, dtype)
    return w, np.zeros(cout, dtype=dtype)


def build_network(spec: NetworkSpec, rng: np.random.Generator,
                  dtype=np.float32) -> SegNetwork:
    """Fresh network: Xavier-uniform weights, zero biases."""
    params = {}
    for name, kind, cin, cout in layer_table(spec):
        w, b = _init_layer(rng, kind, cin, cout, dtype)
        params[name + ".w"] = w
        params[name + ".b"] = b
    return SegNetwork(
        params=params,
        spec=spec,
        stage_history=[{"classes": list(spec.class_set)}],
    )


def head_param_names(class_set) -> set[str]:
    names = set()
    for cls in class_set:
        names.add(f"head.{cls}.w")
        names.add(f"head.{cls}.b")
    return names


def shared_param_names(net: SegNetwork) -> set[str]:
    heads = head_param_names(net.class_set)
    return {n for n in net.params if n not in heads}


def _check_input(net, batch):
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise ValueError(f"batch must be N x H x W x C, got shape {batch.shape}")
    n, h, w, c = batch.shape
    if h % POOL_FACTOR or w % POOL_FACTOR:
        raise ValueError(
            f"spatial dims must be divisible by {POOL_FACTOR}, got {h}x{w}"
        )
    if c != net.spec.in_channels:
        raise ValueError(f"expected {net.spec.in_channels} channels, got {c}")
    return batch.astype(net.dtype, copy=False)


def _run_forward(net: SegNetwork, x, with_tape: bool):
    p = net.params
    tape = [] if with_tape else None

    def record(kind, name, cache):
        if tape is not None:
            tape.append((kind, name, cache))

    a = x
    skips = {}
    for i, n_convs in enumerate(ENC_CONVS, start=1):
        for j in range(1, n_convs + 1):
            name = f"enc{i}_conv{j}"
            a, c = nnops.conv3x3(a, p[name + ".w"], p[name + ".b"])
            record("conv", name, c)
            a, m = nnops.relu(a)
            record("relu", name, m)
        a, c = nnops.maxpool2(a)
        record("pool", i, c)
        skips[i] = a
    for j in (1, 2):
        name = f"center_conv{j}"
        a, c = nnops.conv3x3(a, p[name + ".w"], p[name + ".b"])
        record("conv", name, c)
        a, m = nnops.relu(a)
        record("relu", name, m)
    for i in (5, 4, 3, 2, 1):
        name = f"dec{i}_up"
        a, c = nnops.deconv2(a, p[name + ".w"], p[name + ".b"])
        record("deconv", name, c)
        a, m = nnops.relu(a)
        record("relu", name, m)
        if i > 1:
            split = a.shape[3]
            a = np.concatenate([a, skips[i - 1]], axis=3)
            record("concat", i - 1, split)
        for j in range(1, DEC_CONVS[i] + 1):
            name = f"dec{i}_conv{j}"
            a, c = nnops.conv3x3(a, p[name + ".w"], p[name + ".b"])
            record("conv", name, c)
            a, m = nnops.relu(a)
            record("relu", name, m)

    head_logits = []
    head_caches = []
    for cls in net.class_set:
        z, c = nnops.conv3x3(a, p[f"head.{cls}.w"], p[f"head.{cls}.b"])
        head_logits.append(z)
        head_caches.append((cls, c))
    logits = np.concatenate(head_logits, axis=3)
    record("heads", None, head_caches)
    return logits, tape


def forward(net: SegNetwork, batch, output="probabilities") -> np.ndarray:
    """Run the network on an N x H x W x C batch; returns N x H x W x K."""
    if output not in ("probabilities", "logits"):
        raise ValueError(f"unknown output kind {output!r}")
    x = _check_input(net, batch)
    logits, _ = _run_forward(net, x, with_tape=False)
    return nnops.sigmoid(logits) if output == "probabilities" else logits


def forward_with_tape(net: SegNetwork, batch):
    """Forward pass that also returns the tape needed by backward()."""
    x = _check_input(net, batch)
    return _run_forward(net, x, with_tape=True)


def backward(net: SegNetwork, tape, dlogits) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given d(loss)/d(logits)."""
    p = net.params
    grads = {}
    pending_skip = {}
    dy = None
    for kind, name, cache in reversed(tape):
        if kind == "heads":
            dy = None
            for idx, (cls, c) in enumerate(cache):
                dxh, dw, db = nnops.conv3x3_back(dlogits[..., idx : idx + 1], c)
                grads[f"head.{cls}.w"] = dw
                grads[f"head.{cls}.b"] = db
                dy = dxh if dy is None else dy + dxh
        elif kind == "relu":
            dy = nnops.relu_back(dy, cache)
        elif kind == "conv":
            dy, dw, db = nnops.conv3x3_back(dy, cache)
            grads[name + ".w"] = dw
            grads[name + ".b"] = db
        elif kind == "deconv":
            dy, dw, db = nnops.deconv2_back(dy, cache)
            grads[name + ".w"] = dw
            grads[name + ".b"] = db
        elif kind == "concat":
            split = cache
            pending_skip[name] = dy[..., split:]
            dy = dy[..., :split]
        elif kind == "pool":
            if name in pending_skip:
                dy = dy + pending_skip.pop(name)
            dy = nnops.maxpool2_back(dy, cache)
        else:  # pragma: no cover
            raise AssertionError(f"unknown tape node {kind}")
    for name in p:
        if name not in grads:
            grads[name] = np.zeros_like(p[name])
    return grads


def expand_classifier(memory: SegNetwork, new_classes: ClassSet,
                      rng: np.random.Generator) -> SegNetwork:
    """New trainable network: shared layers and old heads copied bit-exactly
    from the memory network, one fresh Xavier-initialized head per new class,
    class order = old order then new order."""
    if len(new_classes) < 1:
        raise ValueError("need at least one new class")
    merged = memory.class_set.union(new_classes)  # raises on overlap
    spec = NetworkSpec(memory.spec.in_channels, merged, memory.spec.width_scale)
    params = {k: v.copy() for k, v in memory.params.items()}
    w0 = spec.widths[0]
    for cls in new_classes:
        w, b = _init_layer(rng, "conv", w0, 1, memory.dtype)
        params[f"head.{cls}.w"] = w
        params[f"head.{cls}.b"] = b
    history = [dict(h) for h in memory.stage_history]
    history.append({"classes": list(new_classes)})
    return SegNetwork(params=params, spec=spec, stage_history=history)


def freeze_for_remembering(net: SegNetwork, stage_classes: ClassSet) -> FreezeMask:
    """Trainable = all shared layers plus the head channels for stage_classes;
    every other class's head is excluded."""
    unknown = set(stage_classes) - set(net.class_set)
    if unknown:
        raise ValueError(f"classes not in network: {sorted(unknown)}")
    return FreezeMask.of(shared_param_names(net) | head_param_names(stage_classes))


def full_mask(net: SegNetwork) -> FreezeMask:
    return FreezeMask.of(net.params.keys())


def heads_only_mask(net: SegNetwork, classes) -> FreezeMask:
    unknown = set(classes) - set(net.class_set)
    if unknown:
        raise ValueError(f"classes not in network: {sorted(unknown)}")
    return FreezeMask.of(head_param_names(classes))


def count_parameters(net: SegNetwork) -> int:
    return sum(v.size for v in net.params.values())


# --- checkpoint container ---------------------------------------------------
#
# magic (8 bytes) | header length (uint64 LE) | header JSON (UTF-8) |
# concatenated raw parameter bytes, float32 little-endian, C order, in the
# order listed by header["params"].


def save_checkpoint(net: SegNetwork) -> bytes:
    records = []
    blobs = []
    for name in net.params:
        arr = np.ascontiguousarray(net.params[name], dtype="<f4")
        records.append({"name": name, "dtype": "<f4", "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "spec": {
            "in_channels": net.spec.in_channels,
            "width_scale": net.spec.width_scale,
            "classes": list(net.class_set),
        },
        "mode": net.mode,
        "stage_history": net.stage_history,
        "params": records,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<Q", len(hbytes)))
    out.write(hbytes)
    for blob in blobs:
        out.write(blob)
    return out.getvalue()


def load_checkpoint(blob: bytes) -> SegNetwork:
    if len(blob) < 16 or blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not a network checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hlen:
        raise CheckpointFormatError("truncated checkpoint header")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"bad checkpoint header: {e}") from e
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"unsupported format version {header.get('format_version')}"
        )
    spec = NetworkSpec(
        in_channels=header["spec"]["in_channels"],
        class_set=ClassSet(tuple(header["spec"]["classes"])),
        width_scale=header["spec"]["width_scale"],
    )
    params = {}
    offset = 16 + hlen
    for rec in header["params"]:
        shape = tuple(rec["shape"])
        nbytes = int(np.prod(shape)) * 4
        chunk = blob[offset : offset + nbytes]
        if len(chunk) < nbytes:
            raise CheckpointFormatError(f"truncated parameter record {rec['name']}")
        params[rec["name"]] = (
            np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
        )
        offset += nbytes
    net = SegNetwork(
        params=params,
        spec=spec,
        mode=header.get("mode", "trainable"),
        stage_history=header.get("stage_history", []),
    )
    expected = {name + suffix for name, _, _, _ in layer_table(spec)
                for suffix in (".w", ".b")}
    if set(params) != expected:
        raise CheckpointFormatError("parameter names do not match the layer table")
    return net


def save_checkpoint_file(path, net: SegNetwork):
    with open(path, "wb") as f:
        f.write(save_checkpoint(net))


def load_checkpoint_file(path) -> SegNetwork:
    with open(path, "rb") as f:
        return load_checkpoint(f.read())
