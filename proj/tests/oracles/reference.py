"""Independent numpy reference for portpatch.

Re-implements, without sharing any code with the C++ library:
  * the xoshiro256** / splitmix64 generator and Box-Muller normals,
  * the synthetic evolution cycle (base, continued update, task, two fits),
  * the tiny transformer forward pass,
  * a reader/writer for the single-file tensor container.

Used offline to produce the frozen values and fixtures under tests/data.
"""

import json
import math
import struct

import numpy as np
from scipy.special import erf

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix_mix(z):
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK
    return z ^ (z >> 31)


def derive_seed(base, stream):
    return splitmix_mix((base + (stream + 1) * GOLDEN) & MASK)


def rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK


class Xoshiro:
    def __init__(self, seed):
        s = []
        z = seed
        for _ in range(4):
            z = (z + GOLDEN) & MASK
            s.append(splitmix_mix(z))
        self.s = s

    def next(self):
        s = self.s
        result = (rotl((s[1] * 5) & MASK, 7) * 9) & MASK
        t = (s[1] << 17) & MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
        return result

    def uniform(self):
        return (self.next() >> 11) * (1.0 / 9007199254740992.0)

    def normal(self):
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def seeded_normal(shape, seed, mu, sigma):
    g = Xoshiro(seed)
    n = int(np.prod(shape))
    out = np.empty(n)
    for i in range(n):
        out[i] = mu + sigma * g.normal()
    return out.reshape(shape)


# ---------------------------------------------------------------- simulator

DEFAULTS = dict(d=256, r_cp=64, alpha_cp=128.0, r_ds=8, alpha_ds=8.0,
                base_scale=0.0625, cp_scale=0.015, task_rank=4, task_scale=4.0,
                noise_std=0.05, samples=512, fit_steps=300, fit_lr=0.05,
                init_std=0.0625, seed=0, modules=1)


def fit(w, x, y, r, steps, lr, alpha, init_std, init_seed):
    d = w.shape[0]
    m = x.shape[0]
    a = seeded_normal((r, d), init_seed, 0.0, init_std)
    b = np.zeros((d, r))
    s = alpha / r
    losses = []
    for _ in range(steps):
        res = x @ (w + s * (b @ a)) - y
        losses.append(float(np.sum(res * res)) / m)
        gm = (2.0 / m) * (x.T @ res)
        gb = s * gm @ a.T
        ga = s * b.T @ gm
        b = b - lr * gb
        a = a - lr * ga
    res = x @ (w + s * (b @ a)) - y
    losses.append(float(np.sum(res * res)) / m)
    return b, a, losses


def run_cycle(cfg, verbose=False):
    d = cfg["d"]
    ms = derive_seed(cfg["seed"], 0)
    theta = seeded_normal((d, d), derive_seed(ms, 1), 0.0, cfg["base_scale"])
    cb = seeded_normal((d, cfg["r_cp"]), derive_seed(ms, 2), 0.0, cfg["cp_scale"])
    ca = seeded_normal((cfg["r_cp"], d), derive_seed(ms, 3), 0.0, cfg["cp_scale"])
    delta_cp = (cfg["alpha_cp"] / cfg["r_cp"]) * (cb @ ca)
    theta_p = theta + delta_cp

    ts = derive_seed(ms, 10)
    p = seeded_normal((d, cfg["task_rank"]), derive_seed(ts, 1), 0.0, 1.0)
    q = seeded_normal((cfg["task_rank"], d), derive_seed(ts, 2), 0.0, 1.0)
    g = (cfg["task_scale"] / d) * (p @ q)
    m = cfg["samples"]
    x = seeded_normal((m, d), derive_seed(ts, 3), 0.0, 1.0)
    noise = seeded_normal((m, d), derive_seed(ts, 4), 0.0, 1.0)
    y = x @ (theta + g) + cfg["noise_std"] * noise

    init_seed = derive_seed(ms, 11)
    args = (cfg["r_ds"], cfg["fit_steps"], cfg["fit_lr"], cfg["alpha_ds"], cfg["init_std"], init_seed)
    b0, a0, l0 = fit(theta, x, y, *args)
    b1, a1, l1 = fit(theta_p, x, y, *args)
    s = cfg["alpha_ds"] / cfg["r_ds"]
    d_old = s * (b0 @ a0)
    d_new = s * (b1 @ a1)
    naive = theta_p + d_old
    resid = d_new - d_old
    sv_n = np.linalg.svd(naive, compute_uv=False)
    sv_r = np.linalg.svd(resid, compute_uv=False)
    out = dict(naive_sigma=sv_n[0], naive_fro=np.linalg.norm(naive),
               resid_sigma=sv_r[0], resid_fro=np.linalg.norm(resid))
    out["ratio_sigma"] = out["naive_sigma"] / out["resid_sigma"]
    out["ratio_fro"] = out["naive_fro"] / out["resid_fro"]
    if verbose:
        out["loss_old"] = (l0[0], l0[-1])
        out["loss_new"] = (l1[0], l1[-1])
        out["mono_old"] = all(l0[i + 1] <= l0[i] for i in range(len(l0) - 1))
        out["mono_new"] = all(l1[i + 1] <= l1[i] for i in range(len(l1) - 1))
    return out


# ---------------------------------------------------------------- container

DTYPES = {"F32": ("<f4", 4), "F64": ("<f8", 8)}


def read_container(path):
    raw = open(path, "rb").read()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n].decode("utf-8"))
    payload = raw[8 + n:]
    meta = header.pop("__metadata__", {})
    tensors = {}
    for name, info in header.items():
        fmt, _ = DTYPES[info["dtype"]]
        b, e = info["data_offsets"]
        tensors[name] = np.frombuffer(payload[b:e], dtype=fmt).astype(np.float64).reshape(info["shape"])
    return tensors, meta


def write_container(path, tensors, meta, dtype="F64"):
    fmt, size = DTYPES[dtype]
    header = {}
    if meta:
        header["__metadata__"] = meta
    blobs = []
    off = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=fmt)
        data = arr.tobytes()
        header[name] = {"dtype": dtype, "shape": list(arr.shape), "data_offsets": [off, off + len(data)]}
        off += len(data)
        blobs.append(data)
    text = json.dumps(header, separators=(",", ":")).encode("utf-8")
    pad = (8 - (8 + len(text)) % 8) % 8
    text += b" " * pad
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        for blob in blobs:
            f.write(blob)


# ---------------------------------------------------------------- transformer

def layer_norm(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def transformer_forward(w, cfg, tokens):
    d, heads = cfg["d"], cfg["H"]
    dh = d // heads
    x = w["embed.weight"][tokens]
    n = len(tokens)
    for layer in range(cfg["L"]):
        p = f"layers.{layer}."
        q = x @ w[p + "attn.q.weight"]
        k = x @ w[p + "attn.k.weight"]
        v = x @ w[p + "attn.v.weight"]
        outs = []
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            if cfg["causal"]:
                scores = scores + np.triu(np.full((n, n), -np.inf), 1)
            outs.append(softmax(scores) @ v[:, sl])
        attn = np.concatenate(outs, axis=1) @ w[p + "attn.o.weight"]
        x = layer_norm(x + attn, w[p + "ln1.gain"], w[p + "ln1.bias"], cfg["eps"])
        hidden = x @ w[p + "ffn.up.weight"] + w[p + "ffn.up.bias"]
        if cfg["activation"] == "relu":
            hidden = np.maximum(hidden, 0.0)
        else:
            hidden = 0.5 * hidden * (1.0 + erf(hidden / math.sqrt(2.0)))
        ffn = hidden @ w[p + "ffn.down.weight"] + w[p + "ffn.down.bias"]
        x = layer_norm(x + ffn, w[p + "ln2.gain"], w[p + "ln2.bias"], cfg["eps"])
    return x @ w["head.weight"]
