"""Analytical FLOP, parameter and activation-memory accounting.

The network is executed once in inference mode inside a :class:`GradTape`;
every primitive on the tape is priced with the conventions below and the
tape order drives a liveness analysis for peak activation memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor.core import GradTape, OpRecord, no_grad

CONVENTION = (
    "conv: 2*H'*W'*Cout*Cin*kh*kw (+H'*W'*Cout bias); linear: 2*Fin*Fout (+Fout bias); "
    "batch_norm: 2/element; activations & elementwise: 1/element; reductions & pooling: "
    "1/element visited; bilinear: 7/output element; concat/reshape/broadcast/nearest: 0; "
    "memory: 4 bytes/element, parameters + live activations"
)

ELEMENTWISE = {"add", "sub", "mul", "div", "neg", "pow", "exp", "log", "clamp", "relu", "sigmoid", "silu"}
REDUCTIONS = {"sum", "mean", "amax", "global_avg_pool", "global_max_pool"}
FREE = {"reshape", "concat", "broadcast_to", "upsample_nearest"}


def _numel(shape) -> int:
    return int(np.prod(shape, dtype=np.int64)) if shape else 1


def op_flops(rec: OpRecord) -> int:
    """FLOPs of one recorded primitive under :data:`CONVENTION`."""
    op = rec.op
    out_shape = rec.output[1]
    out_n = _numel(out_shape)
    if op == "conv2d":
        cout, cin, kh, kw = rec.inputs[1][1]
        n, _, ho, wo = out_shape
        pix = n * ho * wo * cout
        return 2 * pix * cin * kh * kw + (pix if rec.attrs.get("bias") else 0)
    if op == "linear":
        n, fin = rec.inputs[0][1]
        fout = rec.inputs[1][1][0]
        return n * (2 * fin * fout + (fout if rec.attrs.get("bias") else 0))
    if op == "batch_norm":
        return 2 * out_n
    if op in ELEMENTWISE:
        return out_n
    if op in REDUCTIONS:
        return _numel(rec.inputs[0][1])
    if op in ("max_pool2d", "avg_pool2d"):
        k = rec.attrs["kernel"]
        return out_n * k * k
    if op == "upsample_bilinear":
        return 7 * out_n
    if op in ("softmax", "log_softmax"):
        return 3 * out_n
    if op == "bce_with_logits":
        return 4 * out_n
    if op in FREE:
        return 0
    raise KeyError(f"no FLOP rule for op {op!r}")


@dataclass
class LayerCost:
    name: str
    op: str
    flops: int
    params: int
    output_bytes: int
    output_shape: tuple[int, ...]


@dataclass
class CostReport:
    layers: list[LayerCost]
    total_flops: int
    total_params: int
    peak_activation_bytes: int
    param_bytes: int
    input_shape: tuple[int, ...]
    convention: str = CONVENTION
    live_profile: list[int] = field(default_factory=list, repr=False)

    @property
    def batch(self) -> int:
        return self.input_shape[0]

    @property
    def gflops_per_slice(self) -> float:
        return self.total_flops / self.batch / 1e9

    def gflops_per_volume(self, n_slices: int = 162) -> float:
        return gflops_per_volume(self.gflops_per_slice, n_slices)

    @property
    def peak_mb(self) -> float:
        return self.peak_activation_bytes / 2**20

    def to_dict(self, n_slices: int = 162) -> dict:
        return {
            "convention": self.convention,
            "input_shape": list(self.input_shape),
            "total_flops": self.total_flops,
            "total_params": self.total_params,
            "param_bytes": self.param_bytes,
            "peak_activation_bytes": self.peak_activation_bytes,
            "gflops_per_slice": self.gflops_per_slice,
            "n_slices": n_slices,
            "gflops_per_volume": self.gflops_per_volume(n_slices),
            "layers": [
                {"name": l.name, "op": l.op, "flops": l.flops, "params": l.params,
                 "output_bytes": l.output_bytes, "output_shape": list(l.output_shape)}
                for l in self.layers
            ],
        }

    def to_text(self, n_slices: int = 162, per_layer: bool = True) -> str:
        lines = [f"# convention: {self.convention}"]
        if per_layer:
            lines.append(f"{'layer':<48}{'op':<18}{'flops':>14}{'params':>10}{'out_bytes':>12}")
            for l in self.layers:
                lines.append(f"{l.name:<48}{l.op:<18}{l.flops:>14,}{l.params:>10,}{l.output_bytes:>12,}")
        lines += [
            f"total_flops={self.total_flops}",
            f"total_params={self.total_params}",
            f"peak_activation_bytes={self.peak_activation_bytes}",
            f"gflops_per_slice={self.gflops_per_slice:.6f}",
            f"gflops_per_volume[{n_slices}]={self.gflops_per_volume(n_slices):.3f}",
        ]
        return "\n".join(lines)


def gflops_per_volume(gflops_per_slice: float, n_slices: int) -> float:
    """Per-slice cost times the number of slices in the volume."""
    if n_slices < 1:
        raise ValueError(f"n_slices must be >= 1, got {n_slices}")
    return gflops_per_slice * n_slices


def liveness_peak(records: list[OpRecord], exclude: set[int] = frozenset()) -> tuple[int, list[int]]:
    """Peak of simultaneously live activation bytes along the tape.

    A tensor is live from the step that produces it (or step 0 for external
    inputs) through its last consumer; tensors nobody consumes stay live to
    the end.  View ops alias their input's storage.  Tensors in ``exclude``
    (parameters) are not activations.
    """
    if not records:
        return 0, []
    storage: dict[int, int] = {}
    nbytes: dict[int, int] = {}
    start: dict[int, int] = {}
    end: dict[int, int] = {}
    last = len(records) - 1

    def root(uid):
        return storage.get(uid, uid)

    for i, rec in enumerate(records):
        for uid, shape, item in rec.inputs:
            if uid in exclude:
                continue
            s = root(uid)
            if s not in start:
                start[s] = 0
                nbytes[s] = _numel(shape) * item
            end[s] = i
        uid, shape, item = rec.output
        if rec.view and rec.inputs and rec.inputs[0][0] not in exclude:
            storage[uid] = root(rec.inputs[0][0])
        else:
            start[uid] = i
            nbytes[uid] = _numel(shape) * item
            end[uid] = i
    consumed = {root(u) for rec in records for u, _, _ in rec.inputs}
    for s in start:
        if s not in consumed:
            end[s] = last
    delta = np.zeros(len(records) + 1, dtype=np.int64)
    for s, b in nbytes.items():
        delta[start[s]] += b
        delta[end[s] + 1] -= b
    profile = np.cumsum(delta)[:-1]
    return int(profile.max()), [int(v) for v in profile]


def trace(net, input_shape) -> list[OpRecord]:
    """Run ``net`` once in inference mode and return its tape."""
    shape = tuple(input_shape)
    if len(shape) == 3:
        shape = (1,) + shape
    x = np.zeros(shape, dtype=np.float32)
    z = np.full(shape[0], 0.5, dtype=np.float32)
    was_training = net.training
    net.eval()
    try:
        with no_grad(), GradTape() as tape:
            net(x, z)
    finally:
        net.train(was_training)
    return tape.records


def analyze(net, input_shape) -> CostReport:
    """Trace the network and build the per-layer cost report."""
    records = trace(net, input_shape)
    params = {p.uid: p.size for p in net.parameters()}
    item = {p.uid: p.data.itemsize for p in net.parameters()}
    seen: set[int] = set()
    layers = []
    for rec in records:
        owned = 0
        for uid, _, _ in rec.inputs:
            if uid in params and uid not in seen:
                seen.add(uid)
                owned += params[uid]
        uid, shape, isz = rec.output
        layers.append(LayerCost(
            name=f"{rec.scope}/{rec.op}" if rec.scope else rec.op,
            op=rec.op,
            flops=op_flops(rec),
            params=owned,
            output_bytes=0 if rec.view else _numel(shape) * isz,
            output_shape=tuple(shape),
        ))
    param_bytes = sum(params[u] * item[u] for u in params)
    peak, profile = liveness_peak(records, exclude=set(params))
    return CostReport(
        layers=layers,
        total_flops=sum(l.flops for l in layers),
        total_params=sum(l.params for l in layers),
        peak_activation_bytes=peak + param_bytes,
        param_bytes=param_bytes,
        input_shape=_input_shape(input_shape),
        live_profile=profile,
    )


def _input_shape(shape) -> tuple[int, ...]:
    shape = tuple(shape)
    return (1,) + shape if len(shape) == 3 else shape


def count_flops(net, input_shape) -> CostReport:
    return analyze(net, input_shape)


def peak_activation_bytes(net, input_shape, batch: int = 1) -> int:
    """Parameters plus the peak of live activations for a batch of ``batch``."""
    shape = tuple(input_shape)
    if len(shape) == 4:
        shape = shape[1:]
    return analyze(net, (batch,) + shape).peak_activation_bytes
