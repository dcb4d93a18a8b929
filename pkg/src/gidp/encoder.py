"""Point-cloud encoder: shared per-point MLP -> GeM pooling -> unit descriptor.

All learnable weights live in one flat float64 vector described by a
ParamLayout, so momentum updates, optimizer steps, and checkpointing are
plain array operations. Gradients are hand-derived reverse mode, verified
against central finite differences in the test suite.

The per-point MLP applies ReLU after every layer (including the last), which
keeps GeM inputs nonnegative so fractional powers stay real. The GeM exponent
is learned through p = exp(rho). Descriptors are L2-normalized; the projection
head (used only during pretraining) is a one-hidden-layer MLP followed by the
same normalization.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, LayoutMismatchError
from .pointcloud import PointCloud

DEFAULT_WIDTHS = (3, 64, 128, 256)
CHECKPOINT_MAGIC = b"GIDPCK01"
OPTIMIZER_MAGIC = b"GIDPOPT1"
_LAYOUT_VERSION = "gidp-encoder-layout 1"
_CHUNK = 16  # clouds per stacked forward/backward pass (bounds memory)


def _solve_gem_rho(target: float = 3.0) -> float:
    """rho whose exp is as close to target as float64 allows.

    exp(log(3)) lands 1 ulp off and no rho maps exactly onto 3.0 (the exp of
    consecutive rho values steps by ~1.5 ulp around 3), so the closest
    candidate is chosen.
    """
    base = float(np.log(target))
    candidates = [base, float(np.nextafter(base, np.inf)), float(np.nextafter(base, -np.inf))]
    return min(candidates, key=lambda r: abs(float(np.exp(r)) - target))


GEM_RHO_INIT = _solve_gem_rho(3.0)


# ---------------------------------------------------------------------------
# parameter layout and container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamLayout:
    """Ordered (name, shape) entries defining the flat parameter vector."""

    entries: tuple[tuple[str, tuple[int, ...]], ...]

    @property
    def total_size(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.entries)

    def offsets(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        out = {}
        off = 0
        for name, shape in self.entries:
            out[name] = (off, shape)
            off += int(np.prod(shape))
        return out

    def manifest_text(self) -> str:
        lines = [_LAYOUT_VERSION]
        lines.extend(f"{name} {' '.join(str(d) for d in shape)}" for name, shape in self.entries)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest_text(cls, text: str) -> "ParamLayout":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != _LAYOUT_VERSION:
            raise FormatError("unrecognized checkpoint layout manifest")
        entries = []
        for ln in lines[1:]:
            parts = ln.split()
            try:
                entries.append((parts[0], tuple(int(d) for d in parts[1:])))
            except ValueError as exc:
                raise FormatError(f"malformed layout entry: {ln!r}") from exc
        return cls(entries=tuple(entries))


def make_layout(widths: tuple[int, ...] = DEFAULT_WIDTHS) -> ParamLayout:
    """Layout for a per-point MLP over ``widths``, GeM exponent, and a
    C -> C -> C projection head (C = widths[-1])."""
    if len(widths) < 2 or widths[0] != 3:
        raise ValueError("widths must start at 3 and hold at least one layer")
    if any(w < 1 for w in widths):
        raise ValueError("widths must be positive")
    entries: list[tuple[str, tuple[int, ...]]] = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        entries.append((f"mlp{i}.W", (fan_in, fan_out)))
        entries.append((f"mlp{i}.b", (fan_out,)))
    entries.append(("gem.rho", (1,)))
    c = widths[-1]
    for i in range(2):
        entries.append((f"proj{i}.W", (c, c)))
        entries.append((f"proj{i}.b", (c,)))
    return ParamLayout(entries=tuple(entries))


@dataclass
class EncoderParams:
    """Flat parameter vector plus the layout describing it."""

    layout: ParamLayout
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.ndim != 1 or self.flat.size != self.layout.total_size:
            raise LayoutMismatchError(
                f"layout mismatch: flat vector has {self.flat.size} values, "
                f"layout requires {self.layout.total_size}"
            )

    def view(self, name: str) -> np.ndarray:
        off, shape = self.layout.offsets()[name]
        return self.flat[off : off + int(np.prod(shape))].reshape(shape)

    def views(self) -> dict[str, np.ndarray]:
        out = {}
        off = 0
        for name, shape in self.layout.entries:
            size = int(np.prod(shape))
            out[name] = self.flat[off : off + size].reshape(shape)
            off += size
        return out

    @property
    def widths(self) -> tuple[int, ...]:
        ws = [shape[0] for name, shape in self.layout.entries if name.startswith("mlp") and name.endswith(".W")]
        ws.append(self.descriptor_dim)
        return tuple(ws)

    @property
    def descriptor_dim(self) -> int:
        mlp_ws = [shape for name, shape in self.layout.entries if name.startswith("mlp") and name.endswith(".W")]
        return mlp_ws[-1][1]

    @property
    def num_mlp_layers(self) -> int:
        return sum(1 for name, _ in self.layout.entries if name.startswith("mlp") and name.endswith(".W"))

    @property
    def gem_p(self) -> float:
        return float(np.exp(self.view("gem.rho")[0]))

    def copy(self) -> "EncoderParams":
        return EncoderParams(layout=self.layout, flat=self.flat.copy())


def init_params(
    seed: int,
    widths: tuple[int, ...] = DEFAULT_WIDTHS,
    descriptor_dim: int | None = None,
) -> EncoderParams:
    """Fan-in-scaled uniform weights, zero biases, gem_p = 3.

    ``descriptor_dim``, when given, must equal widths[-1] (it is implied).
    """
    if descriptor_dim is not None and descriptor_dim != widths[-1]:
        raise ValueError("descriptor_dim must equal the last width")
    layout = make_layout(widths)
    rng = np.random.default_rng(seed)
    flat = np.zeros(layout.total_size)
    params = EncoderParams(layout=layout, flat=flat)
    for name, shape in layout.entries:
        if name.endswith(".W"):
            bound = 1.0 / np.sqrt(shape[0])
            params.view(name)[...] = rng.uniform(-bound, bound, size=shape)
    params.view("gem.rho")[0] = GEM_RHO_INIT
    return params


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

@dataclass
class _EncCache:
    x: np.ndarray          # (B, N, 3)
    zs: list[np.ndarray]   # pre-activations, flattened to (B*N, w)
    hs: list[np.ndarray]   # post-ReLU, flattened
    h_last: np.ndarray     # (B, N, C)
    p: float
    s: np.ndarray          # (B, C) mean of h^p
    g: np.ndarray          # (B, C) GeM output
    norm: np.ndarray       # (B,)
    v: np.ndarray          # (B, C) unit descriptors


@dataclass
class _ProjCache:
    v: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    norm: np.ndarray
    u: np.ndarray


def _forward_batch(params: EncoderParams, x: np.ndarray) -> _EncCache:
    """Stacked forward over clouds of equal size; x has shape (B, N, 3)."""
    b, n, _ = x.shape
    views = params.views()
    h = x.reshape(b * n, 3)
    zs, hs = [], []
    for i in range(params.num_mlp_layers):
        z = h @ views[f"mlp{i}.W"] + views[f"mlp{i}.b"]
        h = np.maximum(z, 0.0)
        zs.append(z)
        hs.append(h)
    c = params.descriptor_dim
    h_last = h.reshape(b, n, c)
    p = params.gem_p
    s = (h_last ** p).mean(axis=1)
    g = np.where(s > 0, s, 1.0) ** (1.0 / p) * (s > 0)
    norm = np.sqrt((g ** 2).sum(axis=1))
    safe = np.where(norm > 0, norm, 1.0)
    v = g / safe[:, None]
    return _EncCache(x=x, zs=zs, hs=hs, h_last=h_last, p=p, s=s, g=g, norm=norm, v=v)


def _project_batch(params: EncoderParams, v: np.ndarray) -> _ProjCache:
    views = params.views()
    z1 = v @ views["proj0.W"] + views["proj0.b"]
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ views["proj1.W"] + views["proj1.b"]
    norm = np.sqrt((z2 ** 2).sum(axis=1))
    safe = np.where(norm > 0, norm, 1.0)
    u = z2 / safe[:, None]
    return _ProjCache(v=v, z1=z1, h1=h1, z2=z2, norm=norm, u=u)


def forward(params: EncoderParams, pc: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    """Encode one cloud.

    Returns:
        (descriptor, per_point_features): the unit-norm (C,) global descriptor
        and the (N, C) nonnegative per-point features feeding the pooling.
    """
    cache = _forward_batch(params, pc.points[None, :, :])
    return cache.v[0].copy(), cache.h_last[0].copy()


def encode(params: EncoderParams, clouds: list[PointCloud], project: bool = False) -> np.ndarray:
    """Encode many clouds; returns (B, C) descriptors (projected if asked).

    Clouds are grouped by point count and processed in stacked chunks; each
    cloud's result depends only on its own points.
    """
    c = params.descriptor_dim
    out = np.empty((len(clouds), c))
    for idxs, x in _grouped(clouds):
        cache = _forward_batch(params, x)
        vals = _project_batch(params, cache.v).u if project else cache.v
        out[idxs] = vals
    return out


def gem_pool(features: np.ndarray, p: float) -> np.ndarray:
    """Generalized-mean pool per channel: ((1/N) sum_i h_ic^p)^(1/p).

    p = 1 is the arithmetic mean; large p approaches the per-channel max.
    """
    features = np.asarray(features, dtype=np.float64)
    if p <= 0:
        raise ValueError("gem exponent p must be > 0")
    if features.ndim != 2:
        raise ValueError("features must have shape (N, C)")
    if (features < 0).any():
        raise ValueError("gem_pool requires nonnegative features")
    s = (features ** p).mean(axis=0)
    return np.where(s > 0, s, 1.0) ** (1.0 / p) * (s > 0)


def projection_head(params: EncoderParams, v: np.ndarray) -> np.ndarray:
    """Map a descriptor through the pretraining projection head (unit output)."""
    v = np.asarray(v, dtype=np.float64)
    return _project_batch(params, v[None, :]).u[0].copy()


def _grouped(clouds: list[PointCloud], chunk: int = _CHUNK):
    """Yield (index array, stacked (B, N, 3) block) grouping clouds by N.

    Group order follows first occurrence of each size; blocks respect input
    order, so reductions accumulated over blocks are deterministic.
    """
    by_n: dict[int, list[int]] = {}
    for i, pc in enumerate(clouds):
        by_n.setdefault(len(pc), []).append(i)
    for n, idxs in by_n.items():
        for start in range(0, len(idxs), chunk):
            sel = np.array(idxs[start : start + chunk])
            yield sel, np.stack([clouds[i].points for i in sel])


# ---------------------------------------------------------------------------
# reverse mode
# ---------------------------------------------------------------------------

def _backward_batch(
    params: EncoderParams,
    cache: _EncCache,
    dv: np.ndarray,
    grads: EncoderParams,
) -> None:
    """Accumulate d(sum_i dv_i . v_i)/dtheta into grads (same layout as params)."""
    b, n, c = cache.h_last.shape
    p, s, g, v, norm = cache.p, cache.s, cache.g, cache.v, cache.norm
    gviews = grads.views()
    views = params.views()

    # v = g / |g|: project dv onto the tangent of the sphere
    safe = np.where(norm > 0, norm, 1.0)
    dg = (dv - v * (v * dv).sum(axis=1, keepdims=True)) / safe[:, None]
    dg[norm == 0] = 0.0

    # g_c = s_c^(1/p); channels with s_c = 0 sit at a kink, gradient taken as 0
    pos = s > 0
    s_safe = np.where(pos, s, 1.0)
    ds = np.where(pos, dg * s_safe ** (1.0 / p - 1.0) / p, 0.0)

    # d/dp of s_c^(1/p), with s_c's own p-dependence included
    h = cache.h_last
    hpos = h > 0
    h_safe = np.where(hpos, h, 1.0)
    hp = np.where(hpos, h_safe ** p, 0.0)
    t = (hp * np.where(hpos, np.log(h_safe), 0.0)).mean(axis=1)
    dg_dp = np.where(pos, g * (t / (p * s_safe) - np.log(s_safe) / p ** 2), 0.0)
    dp = float((dg * dg_dp).sum())
    gviews["gem.rho"][0] += dp * p  # p = exp(rho)

    # dS/dH = p * H^(p-1) / N; dead ReLU units are masked downstream anyway
    hpm1 = np.where(hpos, h_safe ** (p - 1.0), 0.0)
    dh = (ds[:, None, :] * hpm1) * (p / n)
    dh_flat = dh.reshape(b * n, c)

    for i in reversed(range(params.num_mlp_layers)):
        dz = dh_flat * (cache.zs[i] > 0)
        inp = cache.x.reshape(b * n, 3) if i == 0 else cache.hs[i - 1]
        gviews[f"mlp{i}.W"] += inp.T @ dz
        gviews[f"mlp{i}.b"] += dz.sum(axis=0)
        if i > 0:
            dh_flat = dz @ views[f"mlp{i}.W"].T


def _project_backward(
    params: EncoderParams,
    cache: _ProjCache,
    du: np.ndarray,
    grads: EncoderParams,
) -> np.ndarray:
    """Accumulate projection-head grads; returns the cotangent on v."""
    gviews = grads.views()
    views = params.views()
    safe = np.where(cache.norm > 0, cache.norm, 1.0)
    dz2 = (du - cache.u * (cache.u * du).sum(axis=1, keepdims=True)) / safe[:, None]
    dz2[cache.norm == 0] = 0.0
    gviews["proj1.W"] += cache.h1.T @ dz2
    gviews["proj1.b"] += dz2.sum(axis=0)
    dh1 = dz2 @ views["proj1.W"].T
    dz1 = dh1 * (cache.z1 > 0)
    gviews["proj0.W"] += cache.v.T @ dz1
    gviews["proj0.b"] += dz1.sum(axis=0)
    return dz1 @ views["proj0.W"].T


def pullback(
    params: EncoderParams,
    clouds: list[PointCloud],
    cotangents: np.ndarray,
    project: bool = False,
) -> np.ndarray:
    """Gradient of sum_i cot_i . f(cloud_i) w.r.t. the flat parameter vector.

    f is the descriptor map (or descriptor + projection head). Activations are
    recomputed chunk-wise so memory stays bounded; accumulation order is fixed
    by the input order, keeping runs bit-reproducible.
    """
    grads = EncoderParams(layout=params.layout, flat=np.zeros(params.layout.total_size))
    for idxs, x in _grouped(clouds):
        enc = _forward_batch(params, x)
        cot = cotangents[idxs]
        if project:
            proj = _project_batch(params, enc.v)
            cot = _project_backward(params, proj, cot, grads)
        _backward_batch(params, enc, cot, grads)
    return grads.flat


def backward(params: EncoderParams, batch, loss_head: str, **kwargs) -> tuple[float, np.ndarray]:
    """Scalar batch loss and its analytic gradient w.r.t. all parameters.

    loss_head selects the objective:
      * "probe":   batch = [(cloud, target)] with loss mean_i <v_i, t_i>
      * "infonce": batch = [(cloud, u_pos, negatives)], kwargs tau /
                   include_positive; gradient flows through the projection head
      * "triplet": batch = [(anchor, positive, negative) clouds], kwargs margin;
                   loss is the mean hinge over active triplets

    Raises FormatError-free ValueError on a non-finite loss, reporting the
    offending batch.
    """
    if loss_head == "probe":
        clouds = [item[0] for item in batch]
        targets = np.array([item[1] for item in batch], dtype=np.float64)
        vs = encode(params, clouds)
        loss = float((vs * targets).sum(axis=1).mean())
        grads = pullback(params, clouds, targets / len(clouds))
    elif loss_head == "infonce":
        from .pretrain import infonce_terms  # loss math lives with the pretraining stage

        clouds = [item[0] for item in batch]
        u_pos = np.array([item[1] for item in batch], dtype=np.float64)
        negatives = np.stack([np.asarray(item[2], dtype=np.float64) for item in batch])
        u = encode(params, clouds, project=True)
        losses, du, _, _ = infonce_terms(
            u,
            u_pos,
            negatives,
            tau=kwargs.get("tau", 1.0),
            include_positive=kwargs.get("include_positive", False),
        )
        loss = float(losses.mean())
        grads = pullback(params, clouds, du / len(clouds), project=True)
    elif loss_head == "triplet":
        from .finetune import triplet_loss

        margin = kwargs.get("margin", 0.2)
        clouds = [pc for triple in batch for pc in triple]
        vs = encode(params, clouds)
        cot = np.zeros_like(vs)
        hinges = []
        for j in range(len(batch)):
            va, vp, vn = vs[3 * j], vs[3 * j + 1], vs[3 * j + 2]
            value, (dva, dvp, dvn) = triplet_loss(va, vp, vn, margin)
            hinges.append(value)
            cot[3 * j], cot[3 * j + 1], cot[3 * j + 2] = dva, dvp, dvn
        n_active = sum(1 for hv in hinges if hv > 0)
        scale = 1.0 / max(n_active, 1)
        loss = float(sum(hinges) * scale)
        grads = pullback(params, clouds, cot * scale)
    else:
        raise ValueError(f"unknown loss head: {loss_head!r}")
    if not np.isfinite(loss):
        raise ValueError(f"non-finite {loss_head} loss on a batch of {len(batch)} items")
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adam (default) or SGD-with-momentum state over the flat vector."""

    kind: str
    lr: float
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def make_optimizer_state(size: int, lr: float, kind: str = "adam", momentum: float = 0.9) -> OptimizerState:
    if kind not in ("adam", "sgd"):
        raise ValueError("optimizer kind must be 'adam' or 'sgd'")
    state = OptimizerState(kind=kind, lr=lr, momentum=momentum)
    state.m = np.zeros(size)
    if kind == "adam":
        state.v = np.zeros(size)
    return state


def optimizer_step(
    params: EncoderParams, grads: np.ndarray, state: OptimizerState
) -> tuple[EncoderParams, OptimizerState]:
    """One update step; returns fresh params and state (inputs untouched)."""
    if grads.shape != params.flat.shape or state.m.shape != params.flat.shape:
        raise LayoutMismatchError("layout mismatch between params, grads, and optimizer state")
    step = state.step + 1
    if state.kind == "adam":
        m = state.beta1 * state.m + (1 - state.beta1) * grads
        v = state.beta2 * state.v + (1 - state.beta2) * grads ** 2
        m_hat = m / (1 - state.beta1 ** step)
        v_hat = v / (1 - state.beta2 ** step)
        new_flat = params.flat - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_state = replace(state, step=step, m=m, v=v)
    else:
        vel = state.momentum * state.m + grads
        new_flat = params.flat - state.lr * vel
        new_state = replace(state, step=step, m=vel)
    return EncoderParams(layout=params.layout, flat=new_flat), new_state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: EncoderParams, path: str | Path, optstate: OptimizerState | None = None) -> None:
    """Binary checkpoint: magic, layout manifest, float64 flat vector,
    optional optimizer section."""
    path = Path(path)
    manifest = params.layout.manifest_text().encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        f.write(params.flat.astype("<f8").tobytes())
        if optstate is not None:
            header = json.dumps(
                {
                    "kind": optstate.kind,
                    "lr": optstate.lr,
                    "step": optstate.step,
                    "beta1": optstate.beta1,
                    "beta2": optstate.beta2,
                    "eps": optstate.eps,
                    "momentum": optstate.momentum,
                },
                sort_keys=True,
            ).encode("utf-8")
            f.write(OPTIMIZER_MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            f.write(optstate.m.astype("<f8").tobytes())
            if optstate.kind == "adam":
                f.write(optstate.v.astype("<f8").tobytes())


def load_checkpoint(
    path: str | Path, expected_layout: ParamLayout | None = None
) -> tuple[EncoderParams, OptimizerState | None]:
    """Load a checkpoint; verifies magic, layout, and exact byte counts."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a gidp checkpoint")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated file")
    (mlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + mlen:
        raise FormatError(f"{path}: truncated file")
    layout = ParamLayout.from_manifest_text(raw[12 : 12 + mlen].decode("utf-8"))
    if expected_layout is not None and layout != expected_layout:
        raise LayoutMismatchError(f"{path}: layout mismatch with the expected parameter layout")
    off = 12 + mlen
    nbytes = layout.total_size * 8
    if len(raw) < off + nbytes:
        raise FormatError(f"{path}: truncated file")
    flat = np.frombuffer(raw[off : off + nbytes], dtype="<f8").copy()
    params = EncoderParams(layout=layout, flat=flat)
    off += nbytes
    if off == len(raw):
        return params, None
    if raw[off : off + 8] != OPTIMIZER_MAGIC:
        raise FormatError(f"{path}: unrecognized trailing section")
    (hlen,) = struct.unpack("<I", raw[off + 8 : off + 12])
    header = json.loads(raw[off + 12 : off + 12 + hlen].decode("utf-8"))
    off += 12 + hlen
    state = OptimizerState(
        kind=header["kind"],
        lr=header["lr"],
        step=header["step"],
        beta1=header["beta1"],
        beta2=header["beta2"],
        eps=header["eps"],
        momentum=header["momentum"],
    )
    state.m = np.frombuffer(raw[off : off + nbytes], dtype="<f8").copy()
    off += nbytes
    if state.kind == "adam":
        if len(raw) < off + nbytes:
            raise FormatError(f"{path}: truncated optimizer section")
        state.v = np.frombuffer(raw[off : off + nbytes], dtype="<f8").copy()
        off += nbytes
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes after optimizer section")
    return params, state
