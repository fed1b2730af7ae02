"""Reference forward evaluation of a :class:`~fdlite.netgraph.LayerGraph`.

Tensors are plain ``float32`` numpy arrays in N,H,W,C layout.  Convolution
reductions accumulate in float64 and round once to float32.  Work inside a
convolution is split into fixed row chunks whose size depends only on the
layer geometry, so the ``workers`` argument changes scheduling but never
the arithmetic.
"""
from __future__ import annotations

import json
import struct
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, ExecutionError, FormatError, StructuralError
from .netgraph import LayerGraph, LayerSpec, TensorShape, shape_infer

CHUNK_BYTES = 32 << 20
BN_FIELDS = ("scale", "shift", "mean", "var")


def as_tensor(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4:
        raise StructuralError(f"expected an N,H,W,C tensor, got shape {x.shape}")
    return x


def _row_chunks(n_rows: int, row_cost: int) -> list[tuple[int, int]]:
    step = max(1, CHUNK_BYTES // max(1, row_cost))
    return [(r, min(n_rows, r + step)) for r in range(0, n_rows, step)]


def _map_chunks(fn, chunks, workers: int):
    if workers <= 1 or len(chunks) == 1:
        for c in chunks:
            fn(c)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(fn, chunks))


def conv2d(x, kernel, bias=None, stride=1, padding=0, groups=1, workers=1) -> np.ndarray:
    """Zero-padded cross-correlation.

    ``kernel`` has layout (kh, kw, in_channels // groups, out_channels).
    """
    x = as_tensor(x)
    kernel = np.asarray(kernel, dtype=np.float32)
    n, h, w, cin = x.shape
    kh, kw, cin_g, cout = kernel.shape
    if groups < 1 or cin % groups or cout % groups or cin // groups != cin_g:
        raise StructuralError(
            f"kernel {kernel.shape} incompatible with {cin} input channels and groups={groups}"
        )
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float32)
        if bias.shape != (cout,):
            raise StructuralError(f"bias shape {bias.shape} != ({cout},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise StructuralError(f"input {x.shape} too small for {kh}x{kw} kernel")

    xp = x.astype(np.float64)
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    out = np.empty((n, ho, wo, cout), dtype=np.float32)
    cout_g = cout // groups
    k64 = kernel.astype(np.float64)
    b64 = None if bias is None else bias.astype(np.float64)
    gsl = [(slice(g * cin_g, (g + 1) * cin_g), slice(g * cout_g, (g + 1) * cout_g))
           for g in range(groups)]

    if groups == cin and cout == cin:
        # depthwise: one filter per channel, fixed tap order
        def run(chunk):
            b, r0, r1 = chunk
            acc = np.zeros((r1 - r0, wo, cout))
            for i in range(kh):
                rows = xp[b, i + r0 * stride:i + (r1 - 1) * stride + 1:stride]
                for j in range(kw):
                    acc += rows[:, j:j + (wo - 1) * stride + 1:stride] * k64[i, j, 0]
            if b64 is not None:
                acc += b64
            out[b, r0:r1] = acc

        row_cost = wo * cout * 8 * 3
    elif kh == kw == 1 and stride == 1 and not padding:
        # pointwise: a plain (positions, cin) @ (cin, cout) product per group
        wmat = [k64[0, 0][:, co] for _, co in gsl]

        def run(chunk):
            b, r0, r1 = chunk
            src = xp[b, r0:r1].reshape(-1, cin)
            acc = np.empty((len(src), cout))
            for (ci, co), wg in zip(gsl, wmat):
                acc[:, co] = src[:, ci] @ wg
            if b64 is not None:
                acc += b64
            out[b, r0:r1] = acc.reshape(r1 - r0, wo, cout)

        row_cost = wo * (cin + cout) * 8
    elif stride == 1:
        # Channel-major GEMM of every tap at once, then shifted accumulation of
        # contiguous (cout, rows, wo) blocks.
        wp = xp.shape[2]
        wall = [k64[:, :, :, co].transpose(0, 1, 3, 2).reshape(kh * kw * cout_g, cin_g)
                for _, co in gsl]

        def run(chunk):
            b, r0, r1 = chunk
            rows = r1 - r0
            src = xp[b, r0:r1 + kh - 1]
            acc = np.zeros((cout, rows, wo))
            for (ci, co), wg in zip(gsl, wall):
                y = (wg @ src[..., ci].reshape(-1, cin_g).T).reshape(
                    kh, kw, cout_g, rows + kh - 1, wp)
                for i in range(kh):
                    for j in range(kw):
                        acc[co] += y[i, j, :, i:i + rows, j:j + wo]
            if b64 is not None:
                acc += b64[:, None, None]
            out[b, r0:r1] = acc.transpose(1, 2, 0)

        row_cost = wp * (cin + 2 * kh * kw * cout) * 8
    else:
        K = kh * kw * cin_g
        # sliding_window_view yields (rows, wo, cin, kh, kw)
        wmat = [k64[:, :, :, co].transpose(2, 0, 1, 3).reshape(K, cout_g) for _, co in gsl]

        def run(chunk):
            b, r0, r1 = chunk
            src = xp[b, r0 * stride:(r1 - 1) * stride + kh]
            win = sliding_window_view(src, (kh, kw), axis=(0, 1))[::stride, ::stride][:, :wo]
            acc = np.empty(((r1 - r0) * wo, cout))
            for (ci, co), wg in zip(gsl, wmat):
                acc[:, co] = win[:, :, ci].reshape(-1, K) @ wg
            if b64 is not None:
                acc += b64
            out[b, r0:r1] = acc.reshape(r1 - r0, wo, cout)

        row_cost = wo * (kh * kw * cin + cout) * 8
    chunks = [(b, r0, r1) for b in range(n) for r0, r1 in _row_chunks(ho, row_cost)]
    _map_chunks(run, chunks, workers)
    return out


def batch_norm(x, scale, shift, mean, var, eps=1e-5) -> np.ndarray:
    x = as_tensor(x)
    vecs = [np.asarray(v, dtype=np.float64) for v in (scale, shift, mean, var)]
    c = x.shape[-1]
    if any(v.shape != (c,) for v in vecs):
        raise StructuralError(f"batch-norm parameters must all have shape ({c},)")
    scale, shift, mean, var = vecs
    if np.any(var < 0):
        raise DataError("batch-norm variance must be non-negative")
    y = np.subtract(x, mean)
    y *= scale / np.sqrt(var + eps)
    y += shift
    return y.astype(np.float32)


def leaky_relu(x, slope=0.1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if not 0 < slope < 1:
        raise DataError(f"LeakyReLU slope must lie in (0, 1), got {slope}")
    # max(x, slope*x) selects x for x >= 0 and slope*x otherwise
    out = x * np.float32(slope)
    np.maximum(x, out, out=out)
    return out


def max_pool2d(x, k, stride, padding=0) -> np.ndarray:
    """Max over k x k windows; padded cells are -inf and never win."""
    x = as_tensor(x)
    if padding >= k:
        raise StructuralError("max-pool padding must be smaller than the window")
    n, h, w, c = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)),
                constant_values=-np.inf)
    out = np.full((n, ho, wo, c), -np.inf, dtype=np.float32)
    for i in range(k):
        for j in range(k):
            win = xp[:, i:i + (ho - 1) * stride + 1:stride, j:j + (wo - 1) * stride + 1:stride, :]
            np.maximum(out, win, out=out)
    return out


def upsample_nearest2x(x, target_hw=None) -> np.ndarray:
    """Nearest x2 upsample, then centre crop (or zero pad) to ``target_hw``."""
    x = as_tensor(x)
    up = x.repeat(2, axis=1).repeat(2, axis=2)
    if target_hw is None:
        return up
    th, tw = target_hw
    out = np.zeros((x.shape[0], th, tw, x.shape[3]), dtype=np.float32)
    uh, uw = up.shape[1:3]

    def span(u, t):
        if u >= t:
            o = (u - t) // 2
            return slice(o, o + t), slice(0, t)
        o = (t - u) // 2
        return slice(0, u), slice(o, o + u)

    (sh, dh), (sw, dw) = span(uh, th), span(uw, tw)
    out[:, dh, dw, :] = up[:, sh, sw, :]
    return out


# --------------------------------------------------------------------------
# weights


class WeightStore:
    """Ordered mapping of tensor name to float32 array.

    Conv nodes own ``<key>.weight`` (kh, kw, in/groups, out) and, with a bias,
    ``<key>.bias``; BatchNorm nodes own ``<key>.scale|shift|mean|var``.
    ``<key>`` is the node's weight key, so shared heads resolve to the same
    entries.
    """

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None):
        self.entries: dict[str, np.ndarray] = {}
        for k, v in (entries or {}).items():
            self.entries[k] = np.ascontiguousarray(v, dtype=np.float32)

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, WeightStore) or list(self.entries) != list(other.entries):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.entries.values(), other.entries.values())
        )

    def manifest(self) -> list[dict]:
        out, offset = [], 0
        for name, arr in self.entries.items():
            nbytes = arr.size * 4
            out.append({
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": nbytes,
                "crc32": zlib.crc32(arr.astype("<f4").tobytes()),
            })
            offset += nbytes
        return out

    def validate(self, graph: LayerGraph) -> list[str]:
        """Raise on missing or mis-shaped entries; warn about and return orphans."""
        expected = expected_entries(graph)
        for name, shape in expected.items():
            if name not in self.entries:
                raise StructuralError(f"missing weight entry {name!r}")
            if self.entries[name].shape != shape:
                raise StructuralError(
                    f"weight {name!r} has shape {self.entries[name].shape}, expected {shape}"
                )
        orphans = [k for k in self.entries if k not in expected]
        if orphans:
            warnings.warn(f"weight entries not used by graph: {orphans}", stacklevel=2)
        return orphans


def expected_entries(graph: LayerGraph) -> dict[str, tuple[int, ...]]:
    out: dict[str, tuple[int, ...]] = {}
    for node in graph.nodes:
        key = node.weight_key
        if node.kind == "Conv":
            out[f"{key}.weight"] = (node.kernel_h, node.kernel_w,
                                    node.in_channels // node.groups, node.out_channels)
            if node.has_bias:
                out[f"{key}.bias"] = (node.out_channels,)
        elif node.kind == "BatchNorm":
            for f in BN_FIELDS:
                out[f"{key}.{f}"] = (node.in_channels,)
    return out


def glorot_bound(node: LayerSpec) -> float:
    area = node.kernel_h * node.kernel_w
    fan_in = area * node.in_channels // node.groups
    fan_out = area * node.out_channels // node.groups
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_weights(graph: LayerGraph, seed: int = 0) -> WeightStore:
    """Glorot-uniform conv kernels, zero biases, identity batch norms."""
    rng = np.random.default_rng(seed)
    entries: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        key = node.weight_key
        if node.kind == "Conv" and f"{key}.weight" not in entries:
            shape = (node.kernel_h, node.kernel_w, node.in_channels // node.groups,
                     node.out_channels)
            bound = glorot_bound(node)
            w = rng.uniform(-bound, bound, size=shape).astype(np.float32)
            entries[f"{key}.weight"] = np.clip(w, -bound, bound)
            if node.has_bias:
                entries[f"{key}.bias"] = np.zeros(node.out_channels, np.float32)
        elif node.kind == "BatchNorm" and f"{key}.scale" not in entries:
            c = node.in_channels
            entries[f"{key}.scale"] = np.ones(c, np.float32)
            entries[f"{key}.shift"] = np.zeros(c, np.float32)
            entries[f"{key}.mean"] = np.zeros(c, np.float32)
            entries[f"{key}.var"] = np.ones(c, np.float32)
    return WeightStore(entries)


def zero_weights(graph: LayerGraph) -> WeightStore:
    """All conv kernels and biases zero; batch norms identity."""
    store = init_weights(graph, 0)
    for name, arr in store.entries.items():
        if name.endswith((".weight", ".bias")):
            arr[...] = 0
    return store


def dumps_weights(store: WeightStore) -> bytes:
    manifest = {"format": "fdw", "version": 1, "dtype": "float32-le", "tensors": store.manifest()}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs = b"".join(a.astype("<f4").tobytes() for a in store.entries.values())
    return struct.pack("<Q", len(head)) + head + blobs


def loads_weights(data: bytes) -> WeightStore:
    if len(data) < 8:
        raise FormatError("weight file too short for its length prefix")
    (hlen,) = struct.unpack("<Q", data[:8])
    if 8 + hlen > len(data):
        raise FormatError("manifest length exceeds file size")
    try:
        manifest = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable manifest: {e}") from None
    if manifest.get("format") != "fdw":
        raise FormatError("not an fdw weight container")
    body = data[8 + hlen:]
    entries: dict[str, np.ndarray] = {}
    expected_offset = 0
    for t in manifest["tensors"]:
        shape = tuple(t["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if t["offset"] != expected_offset or t["nbytes"] != nbytes:
            raise FormatError(f"tensor {t['name']!r}: shape/offset disagree with manifest order")
        blob = body[t["offset"]:t["offset"] + nbytes]
        if len(blob) != nbytes:
            raise FormatError(f"tensor {t['name']!r} truncated")
        if zlib.crc32(blob) != t["crc32"]:
            raise FormatError(f"tensor {t['name']!r} checksum mismatch")
        entries[t["name"]] = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32)
        expected_offset += nbytes
    if expected_offset != len(body):
        raise FormatError(f"{len(body) - expected_offset} trailing bytes after last tensor")
    return WeightStore(entries)


def save_weights(store: WeightStore, path) -> None:
    Path(path).write_bytes(dumps_weights(store))


def load_weights(path, graph: LayerGraph | None = None) -> WeightStore:
    store = loads_weights(Path(path).read_bytes())
    if graph is not None:
        store.validate(graph)
    return store


# --------------------------------------------------------------------------
# forward


def _eval_node(node: LayerSpec, ins: list[np.ndarray], weights: WeightStore, workers: int):
    key = node.weight_key
    kind = node.kind
    if kind == "Conv":
        bias = weights[f"{key}.bias"] if node.has_bias else None
        return conv2d(ins[0], weights[f"{key}.weight"], bias, node.stride, node.padding,
                      node.groups, workers)
    if kind == "BatchNorm":
        return batch_norm(ins[0], *(weights[f"{key}.{f}"] for f in BN_FIELDS), eps=node.eps)
    if kind == "LeakyReLU":
        return leaky_relu(ins[0], node.slope)
    if kind == "MaxPool":
        return max_pool2d(ins[0], node.kernel_h, node.stride, node.padding)
    if kind == "UpsampleNearest2x":
        ref = ins[1].shape[1:3] if len(ins) > 1 else None
        return upsample_nearest2x(ins[0], ref)
    if kind == "Add":
        out = ins[0]
        for other in ins[1:]:
            out = out + other
        return out
    if kind == "Concat":
        return np.concatenate(ins, axis=node.axis)
    if kind == "Reshape":
        x = ins[0]
        return x.reshape(x.shape[0], -1, 1, node.out_channels)
    raise ExecutionError(f"no kernel for {kind}", node.name)


def run_forward(graph: LayerGraph, weights: WeightStore, input, workers: int = 1,
                keep: tuple[str, ...] | None = None) -> dict[str, np.ndarray]:
    """Evaluate ``graph`` in node order.

    Returns the declared outputs keyed by alias, plus any node named in
    ``keep`` keyed by node name.  Intermediates are released after their last
    consumer runs.
    """
    x = as_tensor(input)
    shape_infer(graph, TensorShape(*x.shape))
    missing = [k for k in expected_entries(graph) if k not in weights]
    if missing:
        raise ExecutionError(f"missing weight entries {missing[:5]}", missing[0].rsplit(".", 1)[0])

    wanted = set(graph.outputs.values()) | set(keep or ())
    last_use: dict[str, int] = {}
    for idx, node in enumerate(graph.nodes):
        for src in node.inputs:
            last_use[src] = idx

    values = {graph.inputs[0]: x}
    for idx, node in enumerate(graph.nodes):
        try:
            y = _eval_node(node, [values[s] for s in node.inputs], weights, workers)
        except KeyError as e:
            raise ExecutionError(f"missing weight {e.args[0]!r}", node.name) from None
        except DataError as e:
            raise ExecutionError(str(e), node.name) from e
        if not np.all(np.isfinite(y)):
            raise ExecutionError("non-finite values produced", node.name)
        values[node.name] = y
        for src in node.inputs:
            if last_use.get(src) == idx and src not in wanted:
                values.pop(src, None)

    out = {alias: values[ref] for alias, ref in graph.outputs.items()}
    for name in keep or ():
        out[name] = values[name]
    return out
