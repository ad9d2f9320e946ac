"""Multi-exit binary network families built from a declarative ArchSpec.

A model is a real-weight stem convolution (stride 2) with batch-norm, a flat
list of binary blocks grouped into stages (2x2 average pooling between
stages), and five exit heads attached after configurable block indices. Four
block wirings are available:

* quicknet: plain sign -> binary conv -> batch-norm chain;
* birealnet: same, plus a real-valued identity shortcut (parameter-free
  channel tiling when widths change);
* binarydensenet: each block concatenates a fixed number of new channels;
* meliusnet: dense growth followed by an improvement conv that refines the
  newly added channels in place.

Every model supports two forward routes. The training route works on float
batches with cached intermediates for backprop. The inference route works on
one sample at a time with bit-packed kernels; both routes produce identical
numbers in eval mode because every binary dot product is an exact small
integer.

Compute is tracked in MACs (multiply-accumulates): convolutions and the exit
dense layers are counted, element-wise ops and pooling are not. Each exit's
standalone cost is stem + blocks up to its placement + its own head; a full
pass that evaluates all heads additionally pays for every head.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import bitops, layers

N_EXITS = 5

FAMILIES = ("quicknet", "birealnet", "binarydensenet", "meliusnet")

_model_tokens = itertools.count(1)


@dataclass(frozen=True)
class ArchSpec:
    """Declarative description of a multi-exit network.

    widths is per-stage output channels for quicknet/birealnet and per-stage
    growth for the dense families. exit_placements are 1-based block indices;
    None picks five placements spaced roughly evenly by cumulative MACs.
    """

    family: str
    widths: tuple[int, ...]
    blocks: tuple[int, ...]
    n_classes: int
    input_shape: tuple[int, int, int] = (98, 64, 1)
    exit_placements: tuple[int, ...] | None = None
    stem_channels: int | None = None

    def __post_init__(self):
        fam = self.family.removesuffix("-style")
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if self.exit_placements is not None:
            object.__setattr__(self, "exit_placements", tuple(int(p) for p in self.exit_placements))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if fam not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if not self.widths or len(self.widths) != len(self.blocks):
            raise ValueError("widths and blocks must be non-empty and the same length")
        if any(w <= 0 for w in self.widths):
            raise ValueError("zero or negative stage width")
        if any(b <= 0 for b in self.blocks):
            raise ValueError("zero or negative stage block count")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.input_shape) != 3 or self.input_shape[2] != 1 or min(self.input_shape[:2]) < 1:
            raise ValueError(f"input shape must be (T, n_mels, 1), got {self.input_shape}")
        n_blocks = sum(self.blocks)
        if n_blocks < N_EXITS:
            raise ValueError(f"need at least {N_EXITS} blocks for {N_EXITS} exits, got {n_blocks}")
        p = self.exit_placements
        if p is not None:
            if len(p) != N_EXITS:
                raise ValueError(f"exactly {N_EXITS} exit placements required, got {len(p)}")
            if any(b <= a for a, b in zip(p, p[1:])) or p[0] < 1:
                raise ValueError(f"exit placements must be strictly increasing and >= 1: {p}")
            if p[-1] != n_blocks:
                raise ValueError(f"last exit must sit after the final block ({n_blocks}), got {p[-1]}")

    @property
    def n_blocks(self) -> int:
        return sum(self.blocks)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "widths": list(self.widths),
            "blocks": list(self.blocks),
            "n_classes": self.n_classes,
            "input_shape": list(self.input_shape),
            "exit_placements": None if self.exit_placements is None else list(self.exit_placements),
            "stem_channels": self.stem_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        placements = d.get("exit_placements")
        return cls(
            family=d["family"],
            widths=tuple(d["widths"]),
            blocks=tuple(d["blocks"]),
            n_classes=int(d["n_classes"]),
            input_shape=tuple(d.get("input_shape", (98, 64, 1))),
            exit_placements=None if placements is None else tuple(placements),
            stem_channels=d.get("stem_channels"),
        )


@dataclass(frozen=True)
class ExitStack:
    """All exit distributions from one full forward pass.

    costs[i] is the standalone cost of reaching exit i+1 (stem + trunk up to
    its placement + that head alone); total_macs is the cost of this full
    pass, which evaluates every head.
    """

    probs: tuple[np.ndarray, ...]
    costs: tuple[int, ...]
    total_macs: int

    def __post_init__(self):
        if len(self.probs) != len(self.costs):
            raise ValueError("probs and costs length mismatch")


@dataclass
class HiddenState:
    """Resumable cursor for incremental prefix execution."""

    token: int
    next_block: int  # 1-based index of the next block to execute
    activation: np.ndarray
    consumed_macs: int
    exit_reached: int


# --- blocks -------------------------------------------------------------------


class QuickBlock:
    def __init__(self, cin, cout, rng):
        self.sign = layers.Binarize()
        self.conv = layers.BinConv2d(cin, cout, 3, 1, "same", rng)
        self.bn = layers.BatchNorm(cout)
        self.out_channels = cout

    def sublayers(self):
        return {"conv": self.conv, "bn": self.bn}

    def conv_macs(self, h, w):
        return self.conv.geom.macs(h, w)

    def forward(self, x, mode):
        return self.bn.forward(self.conv.forward(self.sign.forward(x, mode), mode), mode)

    def backward(self, dy):
        return self.sign.backward(self.conv.backward(self.bn.backward(dy)))

    def infer(self, x):
        return self.bn.infer(self.conv.infer(bitops.binarize(x)))


def _tile_channels(x, cout):
    cin = x.shape[-1]
    if cin == cout:
        return x
    reps = math.ceil(cout / cin)
    return np.concatenate([x] * reps, axis=-1)[..., :cout]


def _tile_channels_backward(dy, cin):
    cout = dy.shape[-1]
    if cin == cout:
        return dy
    dx = np.zeros(dy.shape[:-1] + (cin,))
    for j in range(cout):
        dx[..., j % cin] += dy[..., j]
    return dx


class BirealBlock:
    """Binary conv with a real-valued shortcut around it.

    When input and output widths differ the shortcut tiles channels
    cyclically, which keeps it parameter- and MAC-free.
    """

    def __init__(self, cin, cout, rng):
        self.sign = layers.Binarize()
        self.conv = layers.BinConv2d(cin, cout, 3, 1, "same", rng)
        self.bn = layers.BatchNorm(cout)
        self.in_channels = cin
        self.out_channels = cout

    def sublayers(self):
        return {"conv": self.conv, "bn": self.bn}

    def conv_macs(self, h, w):
        return self.conv.geom.macs(h, w)

    def forward(self, x, mode):
        y = self.bn.forward(self.conv.forward(self.sign.forward(x, mode), mode), mode)
        return y + _tile_channels(x, self.out_channels)

    def backward(self, dy):
        dx_main = self.sign.backward(self.conv.backward(self.bn.backward(dy)))
        return dx_main + _tile_channels_backward(dy, self.in_channels)

    def infer(self, x):
        y = self.bn.infer(self.conv.infer(bitops.binarize(x)))
        return y + _tile_channels(x, self.out_channels)


class DenseBlock:
    """Concatenates `growth` freshly computed channels onto the input."""

    def __init__(self, cin, growth, rng):
        self.sign = layers.Binarize()
        self.conv = layers.BinConv2d(cin, growth, 3, 1, "same", rng)
        self.bn = layers.BatchNorm(growth)
        self.in_channels = cin
        self.out_channels = cin + growth

    def sublayers(self):
        return {"conv": self.conv, "bn": self.bn}

    def conv_macs(self, h, w):
        return self.conv.geom.macs(h, w)

    def forward(self, x, mode):
        new = self.bn.forward(self.conv.forward(self.sign.forward(x, mode), mode), mode)
        return np.concatenate([x, new], axis=-1)

    def backward(self, dy):
        c = self.in_channels
        dnew = self.sign.backward(self.conv.backward(self.bn.backward(dy[..., c:])))
        return dy[..., :c] + dnew

    def infer(self, x):
        new = self.bn.infer(self.conv.infer(bitops.binarize(x)))
        return np.concatenate([x, new], axis=-1)


class MeliusBlock:
    """Dense growth followed by an improvement conv.

    The improvement conv reads the concatenated map and adds a correction to
    the `growth` channels that were just appended.
    """

    def __init__(self, cin, growth, rng):
        self.sign1 = layers.Binarize()
        self.conv1 = layers.BinConv2d(cin, growth, 3, 1, "same", rng)
        self.bn1 = layers.BatchNorm(growth)
        self.sign2 = layers.Binarize()
        self.conv2 = layers.BinConv2d(cin + growth, growth, 3, 1, "same", rng)
        self.bn2 = layers.BatchNorm(growth)
        self.in_channels = cin
        self.growth = growth
        self.out_channels = cin + growth

    def sublayers(self):
        return {"conv1": self.conv1, "bn1": self.bn1, "conv2": self.conv2, "bn2": self.bn2}

    def conv_macs(self, h, w):
        return self.conv1.geom.macs(h, w) + self.conv2.geom.macs(h, w)

    def forward(self, x, mode):
        new = self.bn1.forward(self.conv1.forward(self.sign1.forward(x, mode), mode), mode)
        y = np.concatenate([x, new], axis=-1)
        delta = self.bn2.forward(self.conv2.forward(self.sign2.forward(y, mode), mode), mode)
        out = y.copy()
        out[..., -self.growth:] += delta
        return out

    def backward(self, dy):
        g = self.growth
        c = self.in_channels
        ddelta = dy[..., -g:]
        dyy = dy + self.sign2.backward(self.conv2.backward(self.bn2.backward(ddelta)))
        dnew = self.sign1.backward(self.conv1.backward(self.bn1.backward(dyy[..., c:])))
        return dyy[..., :c] + dnew

    def infer(self, x):
        new = self.bn1.infer(self.conv1.infer(bitops.binarize(x)))
        y = np.concatenate([x, new], axis=-1)
        delta = self.bn2.infer(self.conv2.infer(bitops.binarize(y)))
        y[..., -self.growth:] += delta
        return y


def _make_block(family, cin, width, rng):
    if family == "quicknet":
        return QuickBlock(cin, width, rng)
    if family == "birealnet":
        return BirealBlock(cin, width, rng)
    if family == "binarydensenet":
        return DenseBlock(cin, width, rng)
    return MeliusBlock(cin, width, rng)


# --- model --------------------------------------------------------------------


class Model:
    """A built network: stem, blocks, exit heads, and cost bookkeeping."""

    def __init__(self, spec: ArchSpec, seed: int):
        self.spec = spec
        self.seed = int(seed)
        self.token = next(_model_tokens)
        rng = np.random.default_rng(seed)

        t, f, _ = spec.input_shape
        stem_ch = spec.stem_channels or spec.widths[0]
        self.stem = layers.RealConv2d(1, stem_ch, 3, 2, "same", rng)
        self.stem_bn = layers.BatchNorm(stem_ch)
        h, w = self.stem.geom.out_hw(t, f)
        self.stem_macs = self.stem.geom.macs(t, f)

        self.blocks: list = []
        self.pool_before: set[int] = set()  # 1-based block indices preceded by 2x2 pooling
        self.block_macs: list[int] = []
        self.block_hw: list[tuple[int, int]] = []  # spatial size at each block's input (post-pool)
        c = stem_ch
        idx = 0
        for stage, (width, n) in enumerate(zip(spec.widths, spec.blocks)):
            for j in range(n):
                idx += 1
                if stage > 0 and j == 0:
                    self.pool_before.add(idx)
                    h, w = math.ceil(h / 2), math.ceil(w / 2)
                blk = _make_block(spec.family, c, width, rng)
                self.blocks.append(blk)
                self.block_macs.append(blk.conv_macs(h, w))
                self.block_hw.append((h, w))
                c = blk.out_channels
        self.block_channels = [b.out_channels for b in self.blocks]

        trunk_cum = list(itertools.accumulate(self.block_macs, initial=self.stem_macs))[1:]
        if spec.exit_placements is None:
            placements = self._even_mac_placements(trunk_cum)
            self.spec = ArchSpec(
                family=spec.family,
                widths=spec.widths,
                blocks=spec.blocks,
                n_classes=spec.n_classes,
                input_shape=spec.input_shape,
                exit_placements=placements,
                stem_channels=spec.stem_channels,
            )
        self.placements = self.spec.exit_placements

        self.exits = [
            layers.ExitHead(self.block_channels[p - 1], spec.n_classes, rng) for p in self.placements
        ]
        self.exit_costs = tuple(
            trunk_cum[p - 1] + head.macs for p, head in zip(self.placements, self.exits)
        )
        self.total_macs = trunk_cum[-1] + sum(head.macs for head in self.exits)
        if any(b <= a for a, b in zip(self.exit_costs, self.exit_costs[1:])):
            raise ValueError(f"exit costs not strictly increasing: {self.exit_costs}")

    def _even_mac_placements(self, trunk_cum):
        n = len(trunk_cum)
        total = trunk_cum[-1]
        placements = []
        prev = 0
        for k in range(1, N_EXITS + 1):
            if k == N_EXITS:
                p = n
            else:
                target = self.stem_macs + (total - self.stem_macs) * k / N_EXITS
                lo, hi = prev + 1, n - (N_EXITS - k)
                p = min(range(lo, hi + 1), key=lambda b: abs(trunk_cum[b - 1] - target))
            placements.append(p)
            prev = p
        return tuple(placements)

    # --- parameter traversal ---

    def named_layers(self):
        yield "stem", self.stem
        yield "stem_bn", self.stem_bn
        for i, blk in enumerate(self.blocks, start=1):
            for name, lay in blk.sublayers().items():
                yield f"block{i}.{name}", lay
        for i, head in enumerate(self.exits, start=1):
            yield f"exit{i}", head

    def named_params(self):
        for path, lay in self.named_layers():
            binary = lay.binary_param_names()
            for pname, arr in lay.params().items():
                yield f"{path}.{pname}", lay, pname, arr, pname in binary

    def param_count(self) -> int:
        return sum(arr.size for _, _, _, arr, _ in self.named_params())

    def zero_grads(self):
        for _, lay in self.named_layers():
            lay.zero_grads()

    def invalidate_packed(self):
        for _, lay in self.named_layers():
            if hasattr(lay, "invalidate_packed"):
                lay.invalidate_packed()

    # --- input handling ---

    def _input_array(self, feature) -> np.ndarray:
        data = getattr(feature, "data", feature)
        x = np.asarray(data, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, :, None]
        if x.shape != self.spec.input_shape:
            raise ValueError(f"feature shape {x.shape} does not match model input {self.spec.input_shape}")
        return x

    # --- inference route (bit kernels, one sample) ---

    def forward_all_exits(self, feature) -> ExitStack:
        x = self.stem_bn.infer(self.stem.infer(self._input_array(feature)))
        probs = []
        exit_i = 0
        for b, blk in enumerate(self.blocks, start=1):
            if b in self.pool_before:
                x = layers.avgpool2(x)
            x = blk.infer(x)
            while exit_i < N_EXITS and self.placements[exit_i] == b:
                probs.append(self.exits[exit_i].infer(x))
                exit_i += 1
        return ExitStack(tuple(probs), self.exit_costs, self.total_macs)

    def forward_prefix(self, feature, upto_exit: int, state: HiddenState | None = None):
        """Run only as far as the given exit; resumable via the returned state."""
        if not 1 <= upto_exit <= N_EXITS:
            raise ValueError(f"exit index {upto_exit} out of range 1..{N_EXITS}")
        if state is None:
            x = self.stem_bn.infer(self.stem.infer(self._input_array(feature)))
            start = 1
            consumed = self.stem_macs
        else:
            if state.token != self.token:
                raise ValueError("hidden state belongs to a different model")
            if state.exit_reached >= upto_exit:
                raise ValueError(
                    f"cannot resume to exit {upto_exit} from a state already at exit {state.exit_reached}"
                )
            x = state.activation
            start = state.next_block
            consumed = state.consumed_macs
        stop = self.placements[upto_exit - 1]
        for b in range(start, stop + 1):
            if b in self.pool_before:
                x = layers.avgpool2(x)
            x = self.blocks[b - 1].infer(x)
            consumed += self.block_macs[b - 1]
        head = self.exits[upto_exit - 1]
        dist = head.infer(x)
        consumed += head.macs
        return dist, HiddenState(self.token, stop + 1, x, consumed, upto_exit)

    # --- training route (float batches) ---

    def forward_train(self, xb: np.ndarray, mode: layers.Mode) -> list[np.ndarray]:
        """xb is (N, T, F, 1); returns per-exit logits, each (N, n_classes)."""
        if xb.ndim != 4 or xb.shape[1:] != self.spec.input_shape:
            raise ValueError(f"batch shape {xb.shape} does not match model input {self.spec.input_shape}")
        x = self.stem_bn.forward(self.stem.forward(np.asarray(xb, dtype=np.float64), mode), mode)
        self._pool_hw = {}
        logits = [None] * N_EXITS
        exit_i = 0
        for b, blk in enumerate(self.blocks, start=1):
            if b in self.pool_before:
                self._pool_hw[b] = x.shape[1:3]
                x = layers.avgpool2(x)
            x = blk.forward(x, mode)
            while exit_i < N_EXITS and self.placements[exit_i] == b:
                logits[exit_i] = self.exits[exit_i].forward(x, mode)
                exit_i += 1
        return logits

    def backward_train(self, dlogits: list[np.ndarray]) -> None:
        """Accumulates parameter gradients from per-exit logit gradients."""
        dy = None
        exit_i = N_EXITS - 1
        for b in range(len(self.blocks), 0, -1):
            while exit_i >= 0 and self.placements[exit_i] == b:
                dhead = self.exits[exit_i].backward(dlogits[exit_i])
                dy = dhead if dy is None else dy + dhead
                exit_i -= 1
            dy = self.blocks[b - 1].backward(dy)
            if b in self.pool_before:
                h, w = self._pool_hw[b]
                dy = layers.avgpool2_backward(dy, h, w)
        self.stem.backward(self.stem_bn.backward(dy))


def build(spec: ArchSpec, seed: int = 0) -> Model:
    return Model(spec, seed)


def toy_spec(family: str = "quicknet", n_classes: int = 6) -> ArchSpec:
    """Small configuration that trains in minutes on a laptop CPU."""
    return ArchSpec(family=family, widths=(16, 32, 64), blocks=(2, 2, 2), n_classes=n_classes)
