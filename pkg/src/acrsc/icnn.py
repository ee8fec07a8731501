"""Input-convex neural network regularizer with exact derivatives.

Network (layers ``k = 0 .. L-1``, softplus activation ``sigma``)::

    z_0 = sigma(Wx_0 x + b_0)
    z_k = sigma(Wz_k z_{k-1} + Wx_k x + b_k)        Wz_k >= 0
    psi(x) = sum_c r_c * pool(z_{L-1})[c]           r >= 0

``pool`` is the spatial mean for the convolutional variant and the identity
for the dense one.  Nonnegative ``Wz``/``r`` plus a convex nondecreasing
activation make ``psi`` convex in ``x``.

Derivatives are hand-written recurrences:

* reverse pass for ``grad_x psi`` and ``d psi / d theta``;
* forward tangent pass for ``<grad_x psi(x), v>`` followed by a reverse
  pass through the (primal, tangent) pair, giving
  ``d <grad_x psi_theta(x), v> / d theta`` exactly.

All batched functions take a leading batch axis; the single-image wrappers
match the operation names used in the rest of the package.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernels

__all__ = [
    "IcnnArchitecture",
    "IcnnParams",
    "InfeasibleParamsError",
    "CheckpointError",
    "init_params",
    "psi_forward",
    "psi_input_grad",
    "psi_param_grad",
    "input_grad_vjp",
    "psi_values",
    "psi_input_grads",
    "psi_value_and_grads",
    "input_grad_vjp_batch",
    "input_grads_and_vjp",
    "project_feasible",
    "save_params",
    "load_params",
]


class InfeasibleParamsError(ValueError):
    """A nonnegativity-constrained weight has a negative entry."""


class CheckpointError(ValueError):
    """Checkpoint file is unreadable, truncated or inconsistent."""


@dataclass(frozen=True)
class IcnnArchitecture:
    kind: str = "conv"  # "conv" or "dense"
    input_shape: tuple = (28, 28)
    num_layers: int = 3
    width: int = 16  # channels (conv) or units (dense)
    kernel_size: int = 5
    beta: float = 5.0  # softplus sharpness
    activation: str = "softplus"  # or "linear"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.kind not in ("conv", "dense"):
            raise ValueError(f"unknown ICNN kind {self.kind!r}")
        if self.activation not in ("softplus", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.num_layers < 1 or self.width < 1:
            raise ValueError("num_layers and width must be positive")
        if self.kind == "conv" and (len(self.input_shape) != 2 or self.kernel_size % 2 == 0):
            raise ValueError("conv ICNN needs 2-D input and an odd kernel size")
        if self.beta <= 0:
            raise ValueError("beta must be positive")

    @property
    def input_size(self) -> int:
        return math.prod(self.input_shape)

    def tensor_shapes(self) -> dict[str, tuple]:
        w, k = self.width, self.kernel_size
        shapes = {}
        for layer in range(self.num_layers):
            if self.kind == "conv":
                shapes[f"wx{layer}"] = (w, 1, k, k)
                if layer > 0:
                    shapes[f"wz{layer}"] = (w, w, k, k)
            else:
                shapes[f"wx{layer}"] = (w, self.input_size)
                if layer > 0:
                    shapes[f"wz{layer}"] = (w, w)
            shapes[f"b{layer}"] = (w,)
        shapes["readout"] = (w,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


def _is_constrained(name: str) -> bool:
    return name.startswith("wz") or name == "readout"


@dataclass
class IcnnParams:
    arch: IcnnArchitecture
    tensors: dict  # name -> ndarray, ordered as arch.tensor_shapes()

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> "IcnnParams":
        return IcnnParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def check_feasible(self):
        for name, t in self.tensors.items():
            if _is_constrained(name) and np.any(t < 0):
                raise InfeasibleParamsError(f"{name} has negative entries")

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def with_flat(self, vec: np.ndarray) -> "IcnnParams":
        out, i = {}, 0
        for k, v in self.tensors.items():
            out[k] = np.asarray(vec[i : i + v.size], dtype=np.float64).reshape(v.shape).copy()
            i += v.size
        return IcnnParams(self.arch, out)


def init_params(arch: IcnnArchitecture, rng) -> IcnnParams:
    """Random feasible parameters: Gaussian input weights, uniform nonnegative
    ``Wz`` and readout, zero biases.

    The conv readout is scaled by ``sqrt(H W)`` to offset the average
    pooling, so the initial input gradient has norm of order one rather
    than ``1 / sqrt(H W)``.
    """
    tensors = {}
    for name, shape in arch.tensor_shapes().items():
        fan_in = math.prod(shape[1:]) if len(shape) > 1 else shape[0]
        if name.startswith("wx"):
            t = np.asarray(rng.normal(shape)) / math.sqrt(fan_in)
        elif name.startswith("wz"):
            t = np.asarray(rng.uniform(shape)) * (2.0 / fan_in)
        elif name == "readout":
            t = np.asarray(rng.uniform(shape)) * (2.0 / shape[0])
            if arch.kind == "conv":
                t = t * math.sqrt(arch.input_size)
        else:
            t = np.zeros(shape)
        tensors[name] = np.asarray(t, dtype=np.float64).reshape(shape)
    return IcnnParams(arch, tensors)


def project_feasible(params: IcnnParams) -> IcnnParams:
    """Clamp every ``Wz`` and readout entry at zero; other tensors untouched."""
    out = {}
    for name, t in params.tensors.items():
        out[name] = np.maximum(t, 0.0) if _is_constrained(name) else t.copy()
    return IcnnParams(params.arch, out)


# ---------------------------------------------------------------------------
# linear maps.  Conv tensors are kept channel-last (N, H, W, C) internally.


def _im2col(x, k):
    return kernels.im2col(np.ascontiguousarray(x), k)


def _conv(x, K, cols=None):
    o = K.shape[0]
    if cols is None:
        cols = _im2col(x, K.shape[-1])
    out = cols @ K.reshape(o, -1).T
    return out.reshape(x.shape[:3] + (o,))


def _conv_T(y, K):
    return _conv(y, np.ascontiguousarray(K[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))


def _conv_wgrad(x, dy, shape, cols=None):
    o = shape[0]
    if cols is None:
        cols = _im2col(x, shape[-1])
    return (dy.reshape(-1, o).T @ cols).reshape(shape)


def _dense(x, W, cols=None):
    return x @ W.T


def _dense_T(y, W):
    return y @ W


def _dense_wgrad(x, dy, shape, cols=None):
    return dy.T @ x


class _Net:
    """Kind-specific plumbing shared by all derivative routines."""

    def __init__(self, params: IcnnParams):
        params.check_feasible()
        self.p = params.tensors
        self.arch = a = params.arch
        self.L = a.num_layers
        if a.kind == "conv":
            self.lin, self.lin_T, self.wgrad = _conv, _conv_T, _conv_wgrad
        else:
            self.lin, self.lin_T, self.wgrad = _dense, _dense_T, _dense_wgrad

    def prep(self, X):
        X = np.asarray(X, dtype=np.float64)
        shp = self.arch.input_shape
        if X.shape[1:] != shp:
            raise ValueError(f"input shape {X.shape[1:]} does not match {shp}")
        if self.arch.kind == "conv":
            return X[..., None]
        return X.reshape(len(X), -1)

    def unprep(self, G):
        return G.reshape((len(G),) + self.arch.input_shape)

    def act(self, a):
        if self.arch.activation == "linear":
            return a, np.ones_like(a), np.zeros_like(a)
        return kernels.softplus_all(a, self.arch.beta)

    def pool(self, z):
        return z.mean(axis=(1, 2)) if self.arch.kind == "conv" else z

    def pool_T(self, seeds, like):
        # adjoint of psi = pool(z) @ r for per-sample seeds
        r = self.p["readout"]
        if self.arch.kind == "conv":
            hw = like.shape[1] * like.shape[2]
            return np.broadcast_to((seeds[:, None] * r[None, :] / hw)[:, None, None, :], like.shape).copy()
        return seeds[:, None] * r[None, :]

    def bias_sum(self, d):
        return d.reshape(-1, d.shape[-1]).sum(axis=0)

    def cols(self, x):
        # patch matrix shared by every conv applied to x (None for dense)
        return _im2col(x, self.arch.kernel_size) if self.arch.kind == "conv" else None

    def forward(self, X):
        x = self.prep(X)
        xc = self.cols(x)
        zs, zcs, ss, s2s = [], [None], [], []
        for k in range(self.L):
            a = self.lin(x, self.p[f"wx{k}"], xc) + self.p[f"b{k}"]
            if k > 0:
                zcs.append(self.cols(zs[-1]))
                a = a + self.lin(zs[-1], self.p[f"wz{k}"], zcs[k])
            z, s, s2 = self.act(a)
            zs.append(z)
            ss.append(s)
            s2s.append(s2)
        psi = self.pool(zs[-1]) @ self.p["readout"]
        return {"x": x, "xcols": xc, "z": zs, "zcols": zcs, "s": ss, "s2": s2s, "psi": psi}

    def reverse(self, cache, weights=None, want_input=True, want_params=True):
        n = len(cache["psi"])
        dz = self.pool_T(np.ones(n), cache["z"][-1])
        grads = {}
        gx = None
        wshape = (n,) + (1,) * (cache["x"].ndim - 1)
        for k in range(self.L - 1, -1, -1):
            da = dz * cache["s"][k]
            if want_input:
                t = self.lin_T(da, self.p[f"wx{k}"])
                gx = t if gx is None else gx + t
            if want_params:
                dw = da * weights.reshape(wshape)
                grads[f"wx{k}"] = self.wgrad(cache["x"], dw, self.p[f"wx{k}"].shape, cache["xcols"])
                grads[f"b{k}"] = self.bias_sum(dw)
                if k > 0:
                    grads[f"wz{k}"] = self.wgrad(cache["z"][k - 1], dw, self.p[f"wz{k}"].shape, cache["zcols"][k])
            if k > 0:
                dz = self.lin_T(da, self.p[f"wz{k}"])
        if want_params:
            grads["readout"] = weights @ self.pool(cache["z"][-1])
            grads = {name: grads[name] for name in self.p}
        return (self.unprep(gx) if want_input else None), grads

    def vjp(self, cache, V):
        """Parameter gradient of sum_n <grad_x psi(x_n), v_n>."""
        v = self.prep(V)
        vc = self.cols(v)
        n = len(v)
        # forward tangent
        adots, zdots, zdcs = [], [], [None]
        for k in range(self.L):
            ad = self.lin(v, self.p[f"wx{k}"], vc)
            if k > 0:
                zdcs.append(self.cols(zdots[-1]))
                ad = ad + self.lin(zdots[-1], self.p[f"wz{k}"], zdcs[k])
            adots.append(ad)
            zdots.append(cache["s"][k] * ad)
        grads = {"readout": self.pool(zdots[-1]).sum(axis=0)}
        zdot_bar = self.pool_T(np.ones(n), zdots[-1])
        z_bar = None
        for k in range(self.L - 1, -1, -1):
            s, s2 = cache["s"][k], cache["s2"][k]
            adot_bar = zdot_bar * s
            a_bar = zdot_bar * adots[k] * s2
            if z_bar is not None:
                a_bar = a_bar + z_bar * s
            shp = self.p[f"wx{k}"].shape
            grads[f"wx{k}"] = self.wgrad(v, adot_bar, shp, vc) + self.wgrad(cache["x"], a_bar, shp, cache["xcols"])
            grads[f"b{k}"] = self.bias_sum(a_bar)
            if k > 0:
                wz = self.p[f"wz{k}"]
                grads[f"wz{k}"] = self.wgrad(zdots[k - 1], adot_bar, wz.shape, zdcs[k]) + self.wgrad(
                    cache["z"][k - 1], a_bar, wz.shape, cache["zcols"][k]
                )
                zdot_bar = self.lin_T(adot_bar, wz)
                z_bar = self.lin_T(a_bar, wz)
        return {name: grads[name] for name in self.p}


# ---------------------------------------------------------------------------
# batched API


def psi_values(params: IcnnParams, X) -> np.ndarray:
    net = _Net(params)
    return net.forward(X)["psi"]


def psi_input_grads(params: IcnnParams, X) -> np.ndarray:
    net = _Net(params)
    cache = net.forward(X)
    gx, _ = net.reverse(cache, want_params=False)
    return gx


def psi_value_and_grads(params: IcnnParams, X, weights=None, want_input=True, want_params=True):
    """One forward/reverse sweep over a batch.

    Returns ``(psi, input_grads, param_grads)`` where ``param_grads`` is the
    gradient of ``sum_n weights[n] * psi(x_n)`` (``weights`` defaults to ones).
    """
    net = _Net(params)
    cache = net.forward(X)
    n = len(cache["psi"])
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    gx, gp = net.reverse(cache, w, want_input, want_params)
    return cache["psi"], gx, gp


def input_grads_and_vjp(params: IcnnParams, X, direction):
    """Input gradients ``G`` and the vjp for ``V = direction(G)`` from one
    forward pass.  Returns ``(G, V, param_grads)``."""
    net = _Net(params)
    cache = net.forward(X)
    G, _ = net.reverse(cache, want_params=False)
    V = direction(G)
    return G, V, net.vjp(cache, V)


def input_grad_vjp_batch(params: IcnnParams, X, V) -> dict:
    """``d/d theta  sum_n <grad_x psi_theta(x_n), v_n>`` for a batch."""
    net = _Net(params)
    cache = net.forward(X)
    return net.vjp(cache, V)


# ---------------------------------------------------------------------------
# single-image API


def psi_forward(params: IcnnParams, x) -> float:
    return float(psi_values(params, np.asarray(x)[None])[0])


def psi_input_grad(params: IcnnParams, x) -> np.ndarray:
    return psi_input_grads(params, np.asarray(x)[None])[0]


def psi_param_grad(params: IcnnParams, x) -> dict:
    _, _, gp = psi_value_and_grads(params, np.asarray(x)[None], want_input=False)
    return gp


def input_grad_vjp(params: IcnnParams, x, v) -> dict:
    return input_grad_vjp_batch(params, np.asarray(x)[None], np.asarray(v)[None])


# ---------------------------------------------------------------------------
# checkpoint format
#
#   bytes 0..6    b"ACRSC1\n"
#   bytes 7..14   manifest length M, uint64 little-endian
#   next M bytes  UTF-8 JSON manifest
#   remainder     tensor blob, little-endian float64, C order, at the
#                 manifest's offsets (relative to the blob start)

MAGIC = b"ACRSC1\n"
FORMAT_VERSION = 1


def save_params(params: IcnnParams, path, extra: dict | None = None) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, t in params.tensors.items():
        data = np.ascontiguousarray(t, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": "<f8", "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = {
        "magic": "ACRSC1",
        "format_version": FORMAT_VERSION,
        "architecture": params.arch.to_dict(),
        "tensors": entries,
        "blob_size": offset,
        "extra": extra or {},
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        for c in chunks:
            f.write(c)
    return path


def read_manifest(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: wrong magic string")
    head = len(MAGIC) + 8
    if len(raw) < head:
        raise CheckpointError(f"{path}: truncated header")
    (mlen,) = struct.unpack("<Q", raw[len(MAGIC) : head])
    if len(raw) < head + mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[head : head + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    if manifest.get("magic") != "ACRSC1" or manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported manifest magic/version")
    return manifest, raw[head + mlen :]


def load_params(path) -> IcnnParams:
    manifest, blob = read_manifest(path)
    try:
        arch = IcnnArchitecture(**manifest["architecture"])
        entries = manifest["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    if len(blob) != manifest.get("blob_size"):
        raise CheckpointError(f"{path}: blob is {len(blob)} bytes, manifest promises {manifest.get('blob_size')}")
    expected = arch.tensor_shapes()
    tensors = {}
    for e in entries:
        name, shape = e["name"], tuple(e["shape"])
        if expected.get(name) != shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {shape}, architecture expects {expected.get(name)}")
        if e["dtype"] != "<f8" or e["nbytes"] != 8 * math.prod(shape):
            raise CheckpointError(f"{path}: tensor {name} has inconsistent dtype/size")
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"{path}: tensor {name} runs past the end of the blob")
        tensors[name] = np.frombuffer(blob[e["offset"] : end], dtype="<f8").reshape(shape).astype(np.float64)
    if set(tensors) != set(expected):
        raise CheckpointError(f"{path}: tensor set does not match the architecture")
    return IcnnParams(arch, {k: tensors[k] for k in expected})
