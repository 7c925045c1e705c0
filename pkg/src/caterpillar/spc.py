"""Shifted-pillars-concatenation: the window-free local mixing operator.

The operator has two halves.  The shift half turns the input map into one
"neighboring map" per direction: map_d holds, at every position, the pillar
that lies `steps` away in direction d, with the vacated border rows/columns
refilled per the padding mode.  The concatenation half mixes the maps back
into one tensor with per-direction channel reductions, concatenation and a
final fusion projection (or the lighter variants of the mixing ablation).

Direction semantics (steps = s, zero padding shown):

    up:    out[i, j] = x[i + s, j]   bottom s rows refilled
    down:  out[i, j] = x[i - s, j]   top s rows refilled
    left:  out[i, j] = x[i, j + s]   right s cols refilled
    right: out[i, j] = x[i, j - s]   left s cols refilled

Diagonals compose one vertical and one horizontal move of s steps each;
`center` returns the input unchanged.  Padding modes refill the vacated
border from the shrunken map (zero, replicate, reflect) or wrap the original
map so that shift-then-pad equals a cyclic roll (circular).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ReflectRangeError, ShapeError, ShiftRangeError
from .layers import Linear, Module
from .tensor import Rng, concat_channels, ensure_nhwc

DIRECTIONS = (
    "up",
    "down",
    "left",
    "right",
    "center",
    "up-left",
    "up-right",
    "down-left",
    "down-right",
)

# (vertical, horizontal) unit components; +1 pulls from larger indices.
_COMPONENTS = {
    "up": (1, 0),
    "down": (-1, 0),
    "left": (0, 1),
    "right": (0, -1),
    "center": (0, 0),
    "up-left": (1, 1),
    "up-right": (1, -1),
    "down-left": (-1, 1),
    "down-right": (-1, -1),
}

DIRECTION_PRESETS = {
    4: ("up", "down", "left", "right"),
    5: ("up", "down", "left", "right", "center"),
    8: ("up", "down", "left", "right", "up-left", "up-right", "down-left", "down-right"),
    9: (
        "up",
        "down",
        "left",
        "right",
        "up-left",
        "up-right",
        "down-left",
        "down-right",
        "center",
    ),
}

PADDING_MODES = ("zero", "replicate", "circular", "reflect")
MIXING_WAYS = ("reduce_concat_fuse", "reduce_concat", "concat_fuse", "sum_fuse", "sum")


@dataclass(frozen=True)
class SpcConfig:
    """Full ablation space: direction set, shift steps, padding, mixing way."""

    directions: tuple[str, ...] = DIRECTION_PRESETS[4]
    steps: int = 1
    padding: str = "zero"
    mixing: str = "reduce_concat_fuse"

    def __post_init__(self):
        dirs = tuple(self.directions)
        object.__setattr__(self, "directions", dirs)
        if not dirs:
            raise ConfigError("spc config: empty direction set")
        if len(set(dirs)) != len(dirs):
            raise ConfigError(f"spc config: duplicate directions in {dirs}")
        for d in dirs:
            if d not in DIRECTIONS:
                raise ConfigError(f"spc config: unknown direction {d!r}")
        if self.steps < 0:
            raise ConfigError(f"spc config: steps must be >= 0, got {self.steps}")
        if self.padding not in PADDING_MODES:
            raise ConfigError(f"spc config: unknown padding {self.padding!r}")
        if self.mixing not in MIXING_WAYS:
            raise ConfigError(f"spc config: unknown mixing {self.mixing!r}")

    @property
    def n_directions(self) -> int:
        return len(self.directions)

    @property
    def reduces_channels(self) -> bool:
        return self.mixing in ("reduce_concat_fuse", "reduce_concat")

    @classmethod
    def preset(cls, n: int, **overrides) -> "SpcConfig":
        if n not in DIRECTION_PRESETS:
            raise ConfigError(f"spc config: no direction preset for N={n}")
        return cls(directions=DIRECTION_PRESETS[n], **overrides)

    def serialize(self) -> str:
        """Flat key-value form: directions=<preset|a+b+c>;steps=..;padding=..;mixing=.."""
        for n, preset in DIRECTION_PRESETS.items():
            if self.directions == preset:
                dirs = str(n)
                break
        else:
            dirs = "+".join(self.directions)
        return f"directions={dirs};steps={self.steps};padding={self.padding};mixing={self.mixing}"

    @classmethod
    def parse(cls, text: str, base: "SpcConfig" | None = None) -> "SpcConfig":
        """Parse the flat form; unspecified keys fall back to `base` (or defaults)."""
        base = base or cls()
        kwargs = {
            "directions": base.directions,
            "steps": base.steps,
            "padding": base.padding,
            "mixing": base.mixing,
        }
        for chunk in text.replace(",", ";").split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            if "=" not in chunk:
                raise ConfigError(f"spc config: expected key=value, got {chunk!r}")
            key, value = (t.strip() for t in chunk.split("=", 1))
            if key == "directions":
                if value.isdigit():
                    n = int(value)
                    if n not in DIRECTION_PRESETS:
                        raise ConfigError(f"spc config: no direction preset for N={n}")
                    kwargs["directions"] = DIRECTION_PRESETS[n]
                else:
                    kwargs["directions"] = tuple(v.strip() for v in value.split("+"))
            elif key == "steps":
                kwargs["steps"] = int(value)
            elif key in ("padding", "mixing"):
                kwargs[key] = value
            else:
                raise ConfigError(f"spc config: unknown key {key!r}")
        return cls(**kwargs)


def shift2d(x: np.ndarray, direction: str, steps: int) -> np.ndarray:
    """Drop the rows/columns vacated by moving `steps` in `direction`.

    The result is shrunken along each moved axis; position (i, j) of the
    result holds the input pillar that is `steps` away in the direction.
    """
    x = ensure_nhwc(x, "shift2d input")
    if direction not in _COMPONENTS:
        raise ConfigError(f"shift2d: unknown direction {direction!r}")
    vc, hc = _COMPONENTS[direction]
    if direction == "center" or steps == 0:
        return x
    n, h, w, c = x.shape
    if vc and steps >= h:
        raise ShiftRangeError(f"shift2d: steps {steps} >= height {h}")
    if hc and steps >= w:
        raise ShiftRangeError(f"shift2d: steps {steps} >= width {w}")
    if vc == 1:
        x = x[:, steps:, :, :]
    elif vc == -1:
        x = x[:, : h - steps, :, :]
    if hc == 1:
        x = x[:, :, steps:, :]
    elif hc == -1:
        x = x[:, :, : w - steps, :]
    return x


def _pad_axis(x: np.ndarray, axis: int, comp: int, steps: int, mode: str) -> np.ndarray:
    """Refill `steps` positions on the side vacated by a shift of component `comp`."""
    length = x.shape[axis]
    if mode == "reflect" and steps >= length:
        raise ReflectRangeError(
            f"pad2d: reflect needs steps {steps} < remaining extent {length}"
        )
    if mode == "zero":
        shape = list(x.shape)
        shape[axis] = steps
        block = np.zeros(shape, dtype=x.dtype)
    elif mode == "replicate":
        edge = -1 if comp == 1 else 0
        block = np.repeat(x.take([edge], axis=axis), steps, axis=axis)
    elif mode == "reflect":
        if comp == 1:
            idx = np.arange(length - 2, length - 2 - steps, -1)
        else:
            idx = np.arange(steps, 0, -1)
        block = x.take(idx, axis=axis)
    else:
        raise ConfigError(f"pad2d: unknown mode {mode!r}")
    pair = (x, block) if comp == 1 else (block, x)
    return np.concatenate(pair, axis=axis)


def pad2d(
    shrunk: np.ndarray,
    direction: str,
    steps: int,
    mode: str,
    original: np.ndarray | None = None,
) -> np.ndarray:
    """Restore the pre-shift spatial size by refilling the vacated side(s).

    Zero fills zeros; replicate repeats the new edge of the shrunken map;
    reflect mirrors the shrunken map without repeating its edge.  Circular
    must reproduce a cyclic roll of the pre-shift tensor, whose wrapped
    rows/columns are not present in the shrunken map, so it requires the
    `original` tensor.
    """
    shrunk = ensure_nhwc(shrunk, "pad2d input")
    if direction not in _COMPONENTS:
        raise ConfigError(f"pad2d: unknown direction {direction!r}")
    if mode not in PADDING_MODES:
        raise ConfigError(f"pad2d: unknown mode {mode!r}")
    vc, hc = _COMPONENTS[direction]
    if direction == "center" or steps == 0:
        return shrunk
    if mode == "circular":
        if original is None:
            raise ConfigError("pad2d: circular mode needs the pre-shift tensor")
        expect = (
            original.shape[0],
            original.shape[1] - (steps if vc else 0),
            original.shape[2] - (steps if hc else 0),
            original.shape[3],
        )
        if shrunk.shape != expect:
            raise ShapeError(
                f"pad2d: shrunken shape {shrunk.shape} inconsistent with original "
                f"{original.shape} for {direction!r} steps {steps}"
            )
        return np.roll(original, shift=(-vc * steps, -hc * steps), axis=(1, 2))
    out = shrunk
    if vc:
        out = _pad_axis(out, 1, vc, steps, mode)
    if hc:
        out = _pad_axis(out, 2, hc, steps, mode)
    return out


def pillars_shift(x: np.ndarray, cfg: SpcConfig) -> list[np.ndarray]:
    """One full-size neighboring map per configured direction, in order."""
    x = ensure_nhwc(x, "pillars_shift input")
    return [
        pad2d(shift2d(x, d, cfg.steps), d, cfg.steps, cfg.padding, original=x)
        for d in cfg.directions
    ]


def _axis_source_index(length: int, comp: int, steps: int, mode: str) -> np.ndarray:
    """Per output position, the source input index along one axis (-1 = zero fill)."""
    if comp == 0 or steps == 0:
        return np.arange(length)
    if steps >= length:
        raise ShiftRangeError(f"shift adjoint: steps {steps} >= extent {length}")
    src = np.arange(length) + comp * steps
    if mode == "zero":
        out = np.where((src < 0) | (src > length - 1), -1, src)
    elif mode == "replicate":
        out = np.clip(src, 0, length - 1)
    elif mode == "circular":
        out = np.mod(src, length)
    elif mode == "reflect":
        if 2 * steps >= length:
            raise ReflectRangeError(
                f"shift adjoint: reflect needs 2*steps < extent, got steps {steps}, "
                f"extent {length}"
            )
        out = src.copy()
        out[src < 0] = -src[src < 0]
        out[src > length - 1] = 2 * (length - 1) - src[src > length - 1]
    else:
        raise ConfigError(f"shift adjoint: unknown mode {mode!r}")
    return out


_SCATTER_CACHE: dict[tuple, np.ndarray] = {}


def _scatter_matrix(length: int, comp: int, steps: int, mode: str, dtype) -> np.ndarray | None:
    """(out_pos x src_pos) 0/1 matrix of the axis index map; None if identity."""
    key = (length, comp, steps, mode, np.dtype(dtype).str)
    if key not in _SCATTER_CACHE:
        src = _axis_source_index(length, comp, steps, mode)
        if np.array_equal(src, np.arange(length)):
            _SCATTER_CACHE[key] = None
        else:
            mat = np.zeros((length, length), dtype=dtype)
            keep = src >= 0
            mat[np.arange(length)[keep], src[keep]] = 1.0
            _SCATTER_CACHE[key] = mat
    return _SCATTER_CACHE[key]


def _shift_pad_adjoint(dmap: np.ndarray, direction: str, steps: int, mode: str) -> np.ndarray:
    """Adjoint of pad2d(shift2d(x)) routing upstream gradient to source pillars."""
    vc, hc = _COMPONENTS[direction]
    n, h, w, c = dmap.shape
    out = dmap
    row_mat = _scatter_matrix(h, vc, steps, mode, dmap.dtype)
    if row_mat is not None:
        out = np.moveaxis(np.moveaxis(out, 1, -1) @ row_mat, -1, 1)
    col_mat = _scatter_matrix(w, hc, steps, mode, dmap.dtype)
    if col_mat is not None:
        out = np.moveaxis(np.moveaxis(out, 2, -1) @ col_mat, -1, 2)
    return out


class Spc(Module):
    """The shift-and-concatenate local mixer as a differentiable layer.

    Parameter layout follows the mixing way:
      reduce_concat_fuse: one cin x (cin/N) reduction per direction + cin x cout fuse
      reduce_concat:      reductions only (cout must equal cin)
      concat_fuse:        single (N*cin) x cout fuse over the raw concatenation
      sum_fuse:           cin x cout fuse over the elementwise sum
      sum:                parameter-free elementwise sum (cout must equal cin)
    """

    def __init__(
        self,
        cin: int,
        cout: int | None = None,
        cfg: SpcConfig | None = None,
        bias: bool = True,
        rng: Rng | None = None,
    ):
        rng = rng or Rng(0)
        cfg = cfg or SpcConfig()
        cout = cin if cout is None else cout
        self.cin, self.cout, self.cfg = cin, cout, cfg
        nd = cfg.n_directions
        if cfg.reduces_channels and cin % nd != 0:
            raise ConfigError(
                f"spc: mixing {cfg.mixing!r} needs channels {cin} divisible by "
                f"{nd} directions"
            )
        if cfg.mixing in ("reduce_concat", "sum") and cout != cin:
            raise ConfigError(
                f"spc: mixing {cfg.mixing!r} keeps {cin} channels, cannot emit {cout}"
            )
        self._reduce = []
        self.fuse = None
        if cfg.reduces_channels:
            for d in cfg.directions:
                lin = Linear(cin, cin // nd, bias=bias, rng=rng)
                setattr(self, f"reduce_{d.replace('-', '_')}", lin)
                self._reduce.append(lin)
        if cfg.mixing == "reduce_concat_fuse":
            self.fuse = Linear(cin, cout, bias=bias, rng=rng)
        elif cfg.mixing == "concat_fuse":
            self.fuse = Linear(nd * cin, cout, bias=bias, rng=rng)
        elif cfg.mixing == "sum_fuse":
            self.fuse = Linear(cin, cout, bias=bias, rng=rng)

    def _children(self):
        out = [
            (f"reduce_{d.replace('-', '_')}", lin)
            for d, lin in zip(self.cfg.directions, self._reduce)
        ]
        if self.fuse is not None:
            out.append(("fuse", self.fuse))
        return out

    def forward(self, x, training=False):
        x = ensure_nhwc(x, "spc input")
        if x.shape[3] != self.cin:
            raise ShapeError(f"spc: input channels {x.shape[3]} != cin {self.cin}")
        self._in_shape = x.shape
        return pillars_concat(pillars_shift(x, self.cfg), self, training)

    def backward(self, dy):
        cfg = self.cfg
        nd = cfg.n_directions
        mixing = cfg.mixing
        if mixing == "reduce_concat_fuse":
            dz = self.fuse.backward(dy)
            width = self.cin // nd
            dmaps = [
                lin.backward(dz[..., k * width : (k + 1) * width])
                for k, lin in enumerate(self._reduce)
            ]
        elif mixing == "reduce_concat":
            width = self.cin // nd
            dmaps = [
                lin.backward(dy[..., k * width : (k + 1) * width])
                for k, lin in enumerate(self._reduce)
            ]
        elif mixing == "concat_fuse":
            dz = self.fuse.backward(dy)
            dmaps = [dz[..., k * self.cin : (k + 1) * self.cin] for k in range(nd)]
        elif mixing == "sum_fuse":
            ds = self.fuse.backward(dy)
            dmaps = [ds] * nd
        else:
            dmaps = [dy] * nd
        dx = np.zeros(self._in_shape, dtype=dy.dtype)
        for d, dmap in zip(cfg.directions, dmaps):
            dx += _shift_pad_adjoint(dmap, d, cfg.steps, cfg.padding)
        return dx

    def out_shape(self, in_shape):
        return tuple(in_shape[:3]) + (self.cout,)

    def macs(self, in_shape):
        p = int(np.prod(in_shape[:3]))
        mixing = self.cfg.mixing
        if mixing == "reduce_concat_fuse":
            return p * self.cin * self.cin + p * self.cin * self.cout
        if mixing == "reduce_concat":
            return p * self.cin * self.cin
        if mixing == "concat_fuse":
            return p * self.cfg.n_directions * self.cin * self.cout
        if mixing == "sum_fuse":
            return p * self.cin * self.cout
        return 0


def pillars_concat(maps: list[np.ndarray], params: Spc, training: bool = False) -> np.ndarray:
    """Mix the neighboring maps back into one tensor per the mixing way.

    `params` is the Spc layer holding the per-direction reductions and the
    fusion projection; its config decides whether maps are reduced first,
    concatenated raw, or summed.
    """
    cfg = params.cfg
    if len(maps) != cfg.n_directions:
        raise ShapeError(
            f"pillars_concat: {len(maps)} maps for {cfg.n_directions} directions"
        )
    mixing = cfg.mixing
    if mixing == "reduce_concat_fuse":
        z = concat_channels([lin(m, training) for lin, m in zip(params._reduce, maps)])
        return params.fuse(z, training)
    if mixing == "reduce_concat":
        return concat_channels([lin(m, training) for lin, m in zip(params._reduce, maps)])
    if mixing == "concat_fuse":
        return params.fuse(concat_channels(maps), training)
    total = maps[0].copy()
    for m in maps[1:]:
        total += m
    if mixing == "sum_fuse":
        return params.fuse(total, training)
    return total


def spc_param_count(cin: int, cout: int, cfg: SpcConfig, bias: bool = True) -> int:
    """Closed-form parameter count for an Spc layer (cross-checked by enumeration)."""
    nd = cfg.n_directions
    reduce_w = cin * (cin // nd) * nd if cfg.reduces_channels else 0
    reduce_b = (cin // nd) * nd if (cfg.reduces_channels and bias) else 0
    if cfg.mixing == "reduce_concat_fuse":
        fuse_w, fuse_b = cin * cout, cout
    elif cfg.mixing == "concat_fuse":
        fuse_w, fuse_b = nd * cin * cout, cout
    elif cfg.mixing == "sum_fuse":
        fuse_w, fuse_b = cin * cout, cout
    else:
        fuse_w, fuse_b = 0, 0
    return reduce_w + reduce_b + fuse_w + (fuse_b if bias else 0)


def spc_oracle(x: np.ndarray, layer: Spc) -> np.ndarray:
    """Brute-force reference for Spc.forward.

    Gathers every neighbor by scalar index arithmetic, resolves out-of-range
    indices per padding mode inline, and applies all weights with explicit
    python loops.  Shares no code with the production path.
    """
    x = np.asarray(x, dtype=np.float64)
    n, h, w, c = x.shape
    cfg = layer.cfg
    s = cfg.steps
    nd = len(cfg.directions)
    cout = layer.cout
    mixing = cfg.mixing
    mode = cfg.padding

    def resolve(m: int, length: int) -> int | None:
        if 0 <= m < length:
            return m
        if mode == "zero":
            return None
        if mode == "replicate":
            return 0 if m < 0 else length - 1
        if mode == "circular":
            return m % length
        return -m if m < 0 else 2 * (length - 1) - m

    comps = [_COMPONENTS[d] for d in cfg.directions]
    reduce_ws = [lin.w.value for lin in layer._reduce] if layer._reduce else None
    reduce_bs = (
        [lin.b.value if lin.b is not None else None for lin in layer._reduce]
        if layer._reduce
        else None
    )
    fuse_w = layer.fuse.w.value if layer.fuse is not None else None
    fuse_b = layer.fuse.b.value if (layer.fuse is not None and layer.fuse.b is not None) else None

    out = np.zeros((n, h, w, cout))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                neighbors = []
                for vc, hc in comps:
                    si = resolve(i + vc * s, h) if vc else i
                    sj = resolve(j + hc * s, w) if hc else j
                    if si is None or sj is None:
                        neighbors.append([0.0] * c)
                    else:
                        neighbors.append([float(x[b, si, sj, ch]) for ch in range(c)])
                if mixing in ("reduce_concat_fuse", "reduce_concat"):
                    width = c // nd
                    stacked = []
                    for d in range(nd):
                        wd = reduce_ws[d]
                        bd = reduce_bs[d]
                        vec = neighbors[d]
                        for cc in range(width):
                            acc = 0.0
                            for ci in range(c):
                                acc += vec[ci] * float(wd[ci, cc])
                            if bd is not None:
                                acc += float(bd[cc])
                            stacked.append(acc)
                elif mixing == "concat_fuse":
                    stacked = []
                    for d in range(nd):
                        stacked.extend(neighbors[d])
                else:
                    stacked = [0.0] * c
                    for d in range(nd):
                        vec = neighbors[d]
                        for ci in range(c):
                            stacked[ci] += vec[ci]
                if mixing in ("reduce_concat", "sum"):
                    for cc in range(cout):
                        out[b, i, j, cc] = stacked[cc]
                else:
                    for cc in range(cout):
                        acc = 0.0
                        for zi, zv in enumerate(stacked):
                            acc += zv * float(fuse_w[zi, cc])
                        if fuse_b is not None:
                            acc += float(fuse_b[cc])
                        out[b, i, j, cc] = acc
    return out
