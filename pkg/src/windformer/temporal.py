"""Time feature extraction: bidirectional convolutional recurrence over the
scene sequence, then a per-cell linear embedding collapsing the time axis.

The recurrent cells keep the spatial grid intact: every gate is a same-padded
convolution, so hidden states have shape [B, hidden, H, W] throughout. The
forward and backward passes use independent parameters and their per-step
hidden states are channel-concatenated.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Conv2d, Linear, Module

TEMPORAL_VARIANTS = ("empty", "bi-convrnn", "bi-convlstm", "bi-gru", "convgru", "bi-convgru")


class ConvGRUCell(Module):
    """GRU gating with convolutions:

        z = sigmoid(Conv([x, h]))        update gate
        r = sigmoid(Conv([x, h]))        reset gate
        n = tanh(Conv([x, r * h]))       candidate
        h' = (1 - z) * h + z * n

    ``kernel_size=1`` gives the non-convolutional per-cell GRU used by the
    bi-gru ablation (weights shared across cells, no spatial mixing).
    """

    def __init__(self, in_channels, hidden_channels, kernel_size, rng):
        super().__init__()
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        cat = in_channels + hidden_channels
        self.update = Conv2d(cat, hidden_channels, kernel_size, rng)
        self.reset = Conv2d(cat, hidden_channels, kernel_size, rng)
        self.candidate = Conv2d(cat, hidden_channels, kernel_size, rng)

    def init_state(self, batch, height, width, dtype):
        return T.Tensor(np.zeros((batch, self.hidden_channels, height, width), dtype=dtype))

    def step(self, x, state):
        h = state
        if x.shape[2:] != h.shape[2:]:
            raise ShapeError(f"spatial dims differ: input {x.shape}, hidden {h.shape}")
        xh = T.concat([x, h], axis=1)
        # one conv for both gates: same math, half the GEMM dispatches
        zr_w = T.concat([self.update.weight, self.reset.weight], axis=0)
        zr_b = T.concat([self.update.bias, self.reset.bias], axis=0)
        zr = T.sigmoid(T.conv2d(xh, zr_w, zr_b))
        hidden = self.hidden_channels
        z = zr[:, :hidden]
        r = zr[:, hidden:]
        n = T.tanh(self.candidate(T.concat([x, T.mul(r, h)], axis=1)))
        return T.add(T.mul(T.sub(1.0, z), h), T.mul(z, n))

    def output(self, state):
        return state


class ConvLSTMCell(Module):
    """Standard ConvLSTM gating; state is the (h, c) pair."""

    def __init__(self, in_channels, hidden_channels, kernel_size, rng):
        super().__init__()
        self.hidden_channels = hidden_channels
        cat = in_channels + hidden_channels
        self.input_gate = Conv2d(cat, hidden_channels, kernel_size, rng)
        self.forget_gate = Conv2d(cat, hidden_channels, kernel_size, rng)
        self.output_gate = Conv2d(cat, hidden_channels, kernel_size, rng)
        self.cell_gate = Conv2d(cat, hidden_channels, kernel_size, rng)

    def init_state(self, batch, height, width, dtype):
        zeros = np.zeros((batch, self.hidden_channels, height, width), dtype=dtype)
        return (T.Tensor(zeros), T.Tensor(zeros.copy()))

    def step(self, x, state):
        h, c = state
        xh = T.concat([x, h], axis=1)
        w = T.concat([self.input_gate.weight, self.forget_gate.weight,
                      self.output_gate.weight, self.cell_gate.weight], axis=0)
        b = T.concat([self.input_gate.bias, self.forget_gate.bias,
                      self.output_gate.bias, self.cell_gate.bias], axis=0)
        gates = T.conv2d(xh, w, b)
        hidden = self.hidden_channels
        i = T.sigmoid(gates[:, :hidden])
        f = T.sigmoid(gates[:, hidden:2 * hidden])
        o = T.sigmoid(gates[:, 2 * hidden:3 * hidden])
        g = T.tanh(gates[:, 3 * hidden:])
        c_next = T.add(T.mul(f, c), T.mul(i, g))
        return (T.mul(o, T.tanh(c_next)), c_next)

    def output(self, state):
        return state[0]


class ConvRNNCell(Module):
    """Vanilla recurrence: h' = tanh(Conv([x, h]))."""

    def __init__(self, in_channels, hidden_channels, kernel_size, rng):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.cell = Conv2d(in_channels + hidden_channels, hidden_channels, kernel_size, rng)

    def init_state(self, batch, height, width, dtype):
        return T.Tensor(np.zeros((batch, self.hidden_channels, height, width), dtype=dtype))

    def step(self, x, state):
        return T.tanh(self.cell(T.concat([x, state], axis=1)))

    def output(self, state):
        return state


def run_direction(cell, sequence, reverse=False):
    """One directional pass; returns the per-step hidden outputs in input order."""
    if not sequence:
        raise ShapeError("empty sequence")
    b, _, h, w = sequence[0].shape
    state = cell.init_state(b, h, w, sequence[0].dtype)
    steps = reversed(sequence) if reverse else sequence
    outs = []
    for x in steps:
        state = cell.step(x, state)
        outs.append(cell.output(state))
    return outs[::-1] if reverse else outs


class BidirectionalRecurrent(Module):
    """Independent forward and backward cells; per-step outputs concatenated
    as [forward_hidden, backward_hidden] along the channel axis."""

    def __init__(self, forward_cell, backward_cell):
        super().__init__()
        self.forward_cell = forward_cell
        self.backward_cell = backward_cell

    @property
    def out_channels(self):
        return self.forward_cell.hidden_channels + self.backward_cell.hidden_channels

    def forward(self, sequence):
        fwd = run_direction(self.forward_cell, sequence)
        bwd = run_direction(self.backward_cell, sequence, reverse=True)
        return [T.concat([f, b], axis=1) for f, b in zip(fwd, bwd)]


class UnidirectionalRecurrent(Module):
    def __init__(self, cell):
        super().__init__()
        self.cell = cell

    @property
    def out_channels(self):
        return self.cell.hidden_channels

    def forward(self, sequence):
        return run_direction(self.cell, sequence)


class PassThrough(Module):
    """The 'empty' temporal variant: raw scenes go straight to the embedding."""

    def __init__(self, in_channels):
        super().__init__()
        self.out_channels = in_channels

    def forward(self, sequence):
        return list(sequence)


class TurbineEmbed(Module):
    """Per cell, concatenate features across time and project to one vector.

    Input: list of T maps [B, D, H, W]; output [B, H, W, embed_dim]. The map
    is cell-local: cell (i, j) of the output depends only on cell (i, j) of
    the inputs.
    """

    def __init__(self, steps, step_channels, embed_dim, rng):
        super().__init__()
        self.in_features = steps * step_channels
        self.proj = Linear(self.in_features, embed_dim, rng)

    def forward(self, hidden_seq):
        shapes = {x.shape for x in hidden_seq}
        if len(shapes) != 1:
            raise ShapeError(f"per-step maps disagree in shape: {sorted(shapes)}")
        stacked = T.concat(hidden_seq, axis=1)  # [B, T*D, H, W]
        if stacked.shape[1] != self.in_features:
            raise ShapeError(
                f"turbine embed expects {self.in_features} per-cell features, "
                f"got {stacked.shape[1]}"
            )
        return self.proj(T.transpose(stacked, (0, 2, 3, 1)))


def make_temporal_encoder(variant, in_channels, hidden_channels, kernel_size, rng):
    """Encoder for each ablation variant; all expose ``out_channels`` per step."""
    if variant not in TEMPORAL_VARIANTS:
        raise ConfigError(f"unknown temporal variant {variant!r}; one of {TEMPORAL_VARIANTS}")
    if variant == "empty":
        return PassThrough(in_channels)
    if variant == "convgru":
        return UnidirectionalRecurrent(
            ConvGRUCell(in_channels, hidden_channels, kernel_size, rng)
        )
    if variant == "bi-gru":
        # spatial mixing removed: 1x1 kernels make the GRU act per cell
        make = lambda: ConvGRUCell(in_channels, hidden_channels, 1, rng)
    elif variant == "bi-convrnn":
        make = lambda: ConvRNNCell(in_channels, hidden_channels, kernel_size, rng)
    elif variant == "bi-convlstm":
        make = lambda: ConvLSTMCell(in_channels, hidden_channels, kernel_size, rng)
    else:
        make = lambda: ConvGRUCell(in_channels, hidden_channels, kernel_size, rng)
    return BidirectionalRecurrent(make(), make())
