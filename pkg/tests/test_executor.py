import itertools
import json
import math
import warnings

import numpy as np
import pytest

from fdlite import anchorkit as ak
from fdlite import executor as ex
from fdlite import netgraph as ng
from fdlite.errors import DataError, ExecutionError, FormatError, StructuralError


# --------------------------------------------------------------------------
# direct-definition oracles (plain loops, float64)


def conv_loops(x, k, bias, stride, pad, groups):
    n, h, w, cin = x.shape
    kh, kw, cin_g, cout = k.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cout_g = cout // groups
    out = np.zeros((n, ho, wo, cout))
    for b, r, c, o in itertools.product(range(n), range(ho), range(wo), range(cout)):
        g = o // cout_g
        s = 0.0 if bias is None else float(bias[o])
        for i, j, ci in itertools.product(range(kh), range(kw), range(cin_g)):
            y, xx = r * stride + i - pad, c * stride + j - pad
            if 0 <= y < h and 0 <= xx < w:
                s += float(x[b, y, xx, g * cin_g + ci]) * float(k[i, j, ci, o])
        out[b, r, c, o] = s
    return out


def pool_loops(x, k, stride, pad):
    n, h, w, c = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, ho, wo, c))
    for b, r, cc, ch in itertools.product(range(n), range(ho), range(wo), range(c)):
        vals = [x[b, y, xx, ch]
                for y in range(r * stride - pad, r * stride - pad + k)
                for xx in range(cc * stride - pad, cc * stride - pad + k)
                if 0 <= y < h and 0 <= xx < w]
        out[b, r, cc, ch] = max(vals)
    return out


def block_diagonal(k, groups):
    kh, kw, cin_g, cout = k.shape
    cout_g = cout // groups
    dense = np.zeros((kh, kw, cin_g * groups, cout), k.dtype)
    for g in range(groups):
        dense[:, :, g * cin_g:(g + 1) * cin_g, g * cout_g:(g + 1) * cout_g] = \
            k[:, :, :, g * cout_g:(g + 1) * cout_g]
    return dense


def ints(rng, shape, lo=-4, hi=5):
    return rng.integers(lo, hi, shape).astype(np.float32)


# --------------------------------------------------------------------------
# conv2d


def test_conv_scalar_example():
    out = ex.conv2d(np.full((1, 1, 1, 1), 2.0), np.full((1, 1, 1, 1), 3.0))
    assert out.item() == 6.0


def test_conv_ones_example():
    out = ex.conv2d(np.ones((1, 3, 3, 1)), np.ones((3, 3, 1, 1)), padding=1)[0, :, :, 0]
    assert out[1, 1] == 9 and out[0, 0] == 4 and out[0, 1] == 6


@pytest.mark.parametrize("k,stride,pad,groups,cin,cout", [
    (3, 1, 1, 1, 3, 4), (3, 2, 1, 1, 4, 6), (1, 1, 0, 1, 5, 3), (7, 2, 3, 1, 3, 2),
    (3, 1, 1, 2, 4, 6), (3, 2, 1, 2, 4, 4), (3, 1, 1, 4, 4, 4), (3, 2, 1, 4, 4, 4),
    (3, 1, 0, 1, 2, 2), (1, 1, 0, 2, 4, 6), (1, 2, 0, 1, 3, 4),
])
def test_conv_matches_loops_exactly(k, stride, pad, groups, cin, cout):
    rng = np.random.default_rng(k * 100 + stride * 10 + groups)
    x = ints(rng, (2, 7, 9, cin))
    w = ints(rng, (k, k, cin // groups, cout), -2, 3)
    b = ints(rng, (cout,))
    got = ex.conv2d(x, w, b, stride, pad, groups)
    assert np.array_equal(got, conv_loops(x, w, b, stride, pad, groups))


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("groups", [2, 3, 6])
def test_grouped_equals_block_diagonal(stride, groups):
    rng = np.random.default_rng(groups + stride)
    x = ints(rng, (1, 8, 10, 6))
    w = ints(rng, (3, 3, 6 // groups, 6), -3, 4)
    grouped = ex.conv2d(x, w, None, stride, 1, groups)
    dense = ex.conv2d(x, block_diagonal(w, groups), None, stride, 1, 1)
    assert np.array_equal(grouped, dense)


def test_depthwise_never_mixes_channels():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 6, 6, 2)).astype(np.float32)
    w = rng.normal(size=(3, 3, 1, 2)).astype(np.float32)
    full = ex.conv2d(x, w, None, 1, 1, 2)
    x0 = x.copy()
    x0[..., 1] = 0
    assert np.array_equal(ex.conv2d(x0, w, None, 1, 1, 2)[..., 0], full[..., 0])


def test_identity_depthwise_kernel():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 4, 7)).astype(np.float32)
    assert np.array_equal(ex.conv2d(x, np.ones((1, 1, 1, 7)), None, 1, 0, 7), x)


def test_conv_linearity():
    rng = np.random.default_rng(2)
    for _ in range(10):
        x, y = (rng.normal(size=(1, 6, 7, 4)).astype(np.float32) for _ in range(2))
        w = rng.normal(size=(3, 3, 4, 5)).astype(np.float32)
        a, b = rng.normal(size=2)
        lhs = ex.conv2d(a * x + b * y, w, None, 1, 1)
        rhs = a * ex.conv2d(x, w, None, 1, 1) + b * ex.conv2d(y, w, None, 1, 1)
        assert np.allclose(lhs, rhs, rtol=1e-4, atol=1e-4 * np.abs(rhs).max())


def test_conv_shape_errors():
    with pytest.raises(StructuralError):
        ex.conv2d(np.ones((1, 4, 4, 3)), np.ones((3, 3, 2, 4)))
    with pytest.raises(StructuralError):
        ex.conv2d(np.ones((1, 4, 4, 4)), np.ones((3, 3, 2, 3)), groups=2)
    with pytest.raises(StructuralError):
        ex.conv2d(np.ones((1, 4, 4, 3)), np.ones((1, 1, 3, 2)), bias=np.ones(3))


def test_conv_deterministic_across_workers(monkeypatch):
    monkeypatch.setattr(ex, "CHUNK_BYTES", 4096)  # force many chunks
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 17, 13, 8)).astype(np.float32)
    for k, s, g in ((3, 1, 1), (3, 2, 1), (3, 1, 8), (1, 1, 1)):
        w = rng.normal(size=(k, k, 8 // g, 8)).astype(np.float32)
        ref = ex.conv2d(x, w, None, s, k // 2, g, workers=1)
        for workers in (2, 4):
            assert ex.conv2d(x, w, None, s, k // 2, g, workers=workers).tobytes() == ref.tobytes()


# --------------------------------------------------------------------------
# element-wise ops


def test_batch_norm_examples():
    x = np.array([3.0], np.float32).reshape(1, 1, 1, 1)
    assert ex.batch_norm(x, [2], [1], [1], [4], eps=0).item() == 3.0
    rng = np.random.default_rng(4)
    z = rng.normal(size=(1, 3, 3, 2)).astype(np.float32)
    assert np.array_equal(ex.batch_norm(z, [1, 1], [0, 0], [0, 0], [1, 1], eps=0), z)
    const = np.full((1, 2, 2, 2), 5.0, np.float32)
    assert np.array_equal(ex.batch_norm(const, [3, 4], [0.5, -1], [5, 5], [2, 2]),
                          np.broadcast_to(np.float32([0.5, -1]), const.shape))
    with pytest.raises(DataError):
        ex.batch_norm(x, [1], [0], [0], [-1])


def test_batch_norm_integer_oracle():
    rng = np.random.default_rng(5)
    x = ints(rng, (1, 3, 4, 3))
    scale, shift, mean = ints(rng, (3,)), ints(rng, (3,)), ints(rng, (3,))
    var = np.float32([1, 4, 16])
    got = ex.batch_norm(x, scale, shift, mean, var, eps=0)
    ref = scale * (x - mean) / np.sqrt(var) + shift
    assert np.array_equal(got, ref)


def test_leaky_relu_examples():
    x = np.float32([1, 0, -2]).reshape(1, 1, 3, 1)
    assert ex.leaky_relu(x, 0.1).ravel().tolist() == [1.0, 0.0, np.float32(-0.2)]
    with pytest.raises(DataError):
        ex.leaky_relu(x, 1.5)


def test_max_pool_ramp():
    x = np.arange(1, 17, dtype=np.float32).reshape(1, 4, 4, 1)
    got = ex.max_pool2d(x, 3, 2, 1)
    assert np.array_equal(got, pool_loops(x, 3, 2, 1))
    assert got[0, :, :, 0].tolist() == [[6, 8], [14, 16]]


def test_max_pool_examples():
    const = np.full((1, 5, 5, 2), -3.0, np.float32)
    assert np.array_equal(ex.max_pool2d(const, 3, 2, 1), np.full((1, 3, 3, 2), -3.0))
    one = np.float32([[[[7.5]]]])
    assert ex.max_pool2d(one, 1, 1, 0).item() == 7.5
    rng = np.random.default_rng(6)
    x = ints(rng, (2, 7, 6, 3), -9, 0)  # all negative: padding must never win
    assert np.array_equal(ex.max_pool2d(x, 3, 2, 1), pool_loops(x, 3, 2, 1))


def test_upsample_crop_and_pad():
    x = np.arange(6, dtype=np.float32).reshape(1, 2, 3, 1)
    up = ex.upsample_nearest2x(x)
    assert up.shape == (1, 4, 6, 1) and up[0, 3, 5, 0] == 5
    assert np.array_equal(ex.upsample_nearest2x(x, (3, 5)), up[:, 0:3, 0:5])
    padded = ex.upsample_nearest2x(x, (6, 6))
    assert np.array_equal(padded[:, 1:5], up) and not padded[:, 0].any()


# --------------------------------------------------------------------------
# JSON-reading interpreter oracle on random graphs


def interpret(doc, weights, x):
    vals = {doc["inputs"][0]: x.astype(np.float64)}
    for nd in doc["nodes"]:
        ins = [vals[s] for s in nd["inputs"]]
        key = nd["weight"] or nd["name"]
        kind = nd["kind"]
        if kind == "Conv":
            b = weights[f"{key}.bias"] if nd["has_bias"] else None
            y = conv_loops(ins[0], weights[f"{key}.weight"], b, nd["stride"], nd["padding"],
                           nd["groups"])
        elif kind == "BatchNorm":
            s, t, m, v = (weights[f"{key}.{f}"].astype(np.float64) for f in ex.BN_FIELDS)
            y = s * (ins[0] - m) / np.sqrt(v + nd["eps"]) + t
        elif kind == "LeakyReLU":
            y = np.where(ins[0] >= 0, ins[0], nd["slope"] * ins[0])
        elif kind == "MaxPool":
            y = pool_loops(ins[0], nd["kernel_h"], nd["stride"], nd["padding"])
        elif kind == "Add":
            y = ins[0] + ins[1]
        elif kind == "Concat":
            y = np.concatenate(ins, axis=nd["axis"])
        elif kind == "UpsampleNearest2x":
            up = ins[0].repeat(2, 1).repeat(2, 2)
            th, tw = ins[1].shape[1:3]
            y = np.zeros(up.shape[:1] + (th, tw) + up.shape[3:])
            # centred: crop or pad splits the difference, extra row at the end
            oh, ow = (int(math.copysign(abs(u - t) // 2, u - t))
                      for u, t in zip(up.shape[1:3], (th, tw)))
            for r, c in itertools.product(range(th), range(tw)):
                if 0 <= r + oh < up.shape[1] and 0 <= c + ow < up.shape[2]:
                    y[:, r, c] = up[:, r + oh, c + ow]
        elif kind == "Reshape":
            y = ins[0].reshape(ins[0].shape[0], -1, 1, nd["out_channels"])
        vals[nd["name"]] = y.astype(np.float32).astype(np.float64)
    return {a: vals[r] for a, r in doc["outputs"].items()}


def random_graph(rng):
    b = ng.GraphBuilder(slope=float(rng.uniform(0.05, 0.5)), input_channels=3)
    x = "image"
    pool = [x]
    for i in range(int(rng.integers(3, 8))):
        op = rng.choice(["cbl", "cl", "cdw", "pool", "add", "cat", "up", "conv"])
        c = b.channels[x]
        name = f"n{i}"
        if op == "cbl":
            x = b.cbl(x, name, int(rng.choice([1, 3])), int(rng.integers(2, 6)), 1,
                      int(rng.integers(0, 2)))
        elif op == "cl":
            x = b.cl(x, name, 3, int(rng.integers(2, 6)), int(rng.integers(1, 3)), 1)
        elif op == "cdw":
            x = b.cdw(x, name, c, int(rng.integers(2, 6)), int(rng.integers(1, 3)))
        elif op == "pool":
            x = b.maxpool(x, name, 3, 2, 1)
        elif op == "conv":
            g = int(rng.choice([d for d in (1, 2, 3) if c % d == 0]))
            x = b.conv(x, name, 3, g * int(rng.integers(1, 3)), 1, 1, g, bias=True)
        elif op == "add":
            y = b.conv(x, name + ".side", 1, c, bias=True)
            x = b.add(x, y, name)
        elif op == "cat":
            y = b.conv(x, name + ".side", 1, int(rng.integers(1, 4)))
            x = b.concat([x, y], name)
        elif op == "up":
            x = b.upsample(x, pool[0] if rng.uniform() < 0.5 else x, name)
        pool.append(x)
    flat = b.reshape(x, "flat", 1)
    return b.graph({"out": flat, "feat": x})


def randomize(store, rng):
    out = {}
    for k, v in store.entries.items():
        if k.endswith(".var"):
            out[k] = rng.uniform(0.5, 2.0, v.shape)
        elif k.endswith((".scale", ".shift", ".mean", ".bias")):
            out[k] = rng.normal(size=v.shape)
        else:
            out[k] = v
    return ex.WeightStore(out)


def test_run_forward_matches_json_interpreter():
    rng = np.random.default_rng(11)
    for trial in range(12):
        g = random_graph(rng)
        w = randomize(ex.init_weights(g, trial), rng)
        x = rng.normal(size=(1, 9, 11, 3)).astype(np.float32)
        got = ex.run_forward(g, w, x)
        ref = interpret(json.loads(g.dumps()), w, x)
        for alias in g.outputs:
            assert got[alias].shape == ref[alias].shape
            assert np.allclose(got[alias], ref[alias], rtol=1e-5, atol=1e-5), trial


# --------------------------------------------------------------------------
# full model


@pytest.fixture(scope="module")
def fdlite():
    return ng.build_fdlite()


def test_zero_weights_give_zero_logits(fdlite):
    outs = ex.run_forward(fdlite, ex.zero_weights(fdlite), np.ones((1, 64, 96, 3), np.float32))
    for u in (1, 2):
        assert not outs[f"cls_{u}"].any()
        assert outs[f"cls_{u}"].shape == (1, ak.anchor_count(96, 64), 1, 2)
        assert outs[f"bbox_{u}"].shape[1] == outs[f"landm_{u}"].shape[1] == ak.anchor_count(96, 64)


@pytest.mark.parametrize("h,w", [(64, 64), (100, 72), (33, 47)])
def test_output_rows_match_anchor_count(fdlite, h, w):
    shapes = ng.shape_infer(fdlite, ng.TensorShape(1, h, w, 3))
    assert shapes[fdlite.outputs["cls_2"]].h == ak.anchor_count(w, h)


def test_run_forward_deterministic(fdlite, monkeypatch):
    monkeypatch.setattr(ex, "CHUNK_BYTES", 1 << 16)
    w = ex.init_weights(fdlite, 3)
    x = np.random.default_rng(0).uniform(-100, 100, (1, 96, 128, 3)).astype(np.float32)
    a = ex.run_forward(fdlite, w, x)
    b = ex.run_forward(fdlite, w, x)
    c = ex.run_forward(fdlite, w, x, workers=3)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes() == c[k].tobytes()


def test_run_forward_errors(fdlite):
    w = ex.init_weights(fdlite, 0)
    del w.entries["head1.cls.weight"]
    with pytest.raises(ExecutionError, match="head1.cls"):
        ex.run_forward(fdlite, w, np.zeros((1, 64, 64, 3), np.float32))
    g = ng.GraphBuilder()
    y = g.bn("image", "bn")
    graph = g.graph({"o": y})
    store = ex.init_weights(graph, 0)
    store.entries["bn.var"][:] = -1
    with pytest.raises(ExecutionError, match="bn"):
        ex.run_forward(graph, store, np.zeros((1, 4, 4, 3), np.float32))


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_intermediate_names_node():
    g = ng.GraphBuilder()
    y = g.conv("image", "c", 1, 2, bias=True)
    graph = g.graph({"o": y})
    store = ex.init_weights(graph, 0)
    store.entries["c.bias"][:] = np.float32(3e38)
    x = np.full((1, 2, 2, 3), 1e38, np.float32)
    store.entries["c.weight"][:] = 1
    with pytest.raises(ExecutionError, match="non-finite") as err:
        ex.run_forward(graph, store, x)
    assert err.value.node == "c"


def test_keep_returns_intermediates(fdlite):
    outs = ex.run_forward(fdlite, ex.zero_weights(fdlite), np.zeros((1, 64, 64, 3), np.float32),
                          keep=("ccpm1.u2.act",))
    assert outs["ccpm1.u2.act"].shape == (1, 8, 8, 32)


# --------------------------------------------------------------------------
# weights


def test_init_weights_contract(fdlite):
    a, b = ex.init_weights(fdlite, 9), ex.init_weights(fdlite, 9)
    assert a == b and a != ex.init_weights(fdlite, 10)
    for node in fdlite.nodes:
        key = node.weight_key
        if node.kind == "Conv":
            fan_in = node.kernel_h * node.kernel_w * node.in_channels // node.groups
            fan_out = node.kernel_h * node.kernel_w * node.out_channels // node.groups
            bound = math.sqrt(6 / (fan_in + fan_out))
            assert np.abs(a[f"{key}.weight"]).max() <= np.float32(bound)
        elif node.kind == "BatchNorm":
            assert np.all(a[f"{key}.scale"] == 1.0) and np.all(a[f"{key}.var"] == 1.0)
            assert not a[f"{key}.shift"].any() and not a[f"{key}.mean"].any()
    assert a.validate(fdlite) == []


def test_shared_heads_have_one_entry(fdlite):
    names = set(ex.expected_entries(fdlite))
    assert "head2.landm.weight" in names
    assert not any(".u1." in n or ".u2." in n for n in names if n.startswith("head"))


def test_weights_round_trip(tmp_path, fdlite):
    store = ex.init_weights(fdlite, 1)
    p = tmp_path / "m.fdw"
    ex.save_weights(store, p)
    again = ex.load_weights(p, fdlite)
    assert again == store
    ex.save_weights(again, tmp_path / "m2.fdw")
    assert (tmp_path / "m2.fdw").read_bytes() == p.read_bytes()


def test_weight_file_layout():
    store = ex.WeightStore({"a.weight": np.arange(6, dtype=np.float32).reshape(1, 1, 2, 3),
                            "a.bias": np.float32([1, 2, 3])})
    data = ex.dumps_weights(store)
    hlen = int.from_bytes(data[:8], "little")
    manifest = json.loads(data[8:8 + hlen])
    assert [t["name"] for t in manifest["tensors"]] == ["a.weight", "a.bias"]
    assert [t["offset"] for t in manifest["tensors"]] == [0, 24]
    assert np.frombuffer(data[8 + hlen:], "<f4").tolist() == [0, 1, 2, 3, 4, 5, 1, 2, 3]


def test_weight_file_corruption():
    data = ex.dumps_weights(ex.WeightStore({"x.bias": np.float32([1, 2, 3, 4])}))
    with pytest.raises(FormatError):
        ex.loads_weights(data[:-2])
    with pytest.raises(FormatError):
        ex.loads_weights(data + b"\0\0\0\0")
    with pytest.raises(FormatError):
        ex.loads_weights(data[:5])
    flipped = bytearray(data)
    flipped[-1] ^= 0xFF
    with pytest.raises(FormatError, match="checksum"):
        ex.loads_weights(bytes(flipped))
    with pytest.raises(FormatError):
        ex.loads_weights((1000).to_bytes(8, "little") + b"{}")


def test_validate_missing_shape_and_orphans(fdlite):
    store = ex.init_weights(fdlite, 0)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        orphans = ex.WeightStore({**store.entries, "stale.weight": np.zeros(2)}).validate(fdlite)
    assert orphans == ["stale.weight"] and "stale.weight" in str(rec[0].message)
    bad = dict(store.entries)
    bad["ife.cbl.conv.weight"] = np.zeros((3, 3, 3, 8))
    with pytest.raises(StructuralError, match="ife.cbl.conv.weight"):
        ex.WeightStore(bad).validate(fdlite)
    bad.pop("ife.cbl.conv.weight")
    with pytest.raises(StructuralError, match="missing"):
        ex.WeightStore(bad).validate(fdlite)
