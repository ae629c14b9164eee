"""Recurrent state-transition cells: a simple tanh RNN and a standard LSTM.

Both cells step a fixed-size state with shared weights: the input is first
projected by the input weight matrix (whose extra last row carries the
step flag added by the pondering loop), combined with the recurrent
projection, and passed through the cell nonlinearity. The readout is an
affine map of the output-visible part of the state; for the LSTM that is
the hidden vector, so the memory-cell portion has no output weights at
all (equivalently, its readout columns are fixed to zero and never
updated).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tape, Var


@dataclass
class CellParams:
    """Weights and biases for one cell plus its readout and halting head."""

    kind: str                # "rnn" | "lstm"
    input_size: int          # task input width, before the step-flag element
    hidden_size: int
    output_size: int
    w_in: np.ndarray         # (input_size + 1, proj); last row is the flag row
    w_rec: np.ndarray        # (hidden, proj)
    b_rec: np.ndarray        # (1, proj)
    w_out: np.ndarray        # (hidden, output)
    b_out: np.ndarray        # (1, output)
    w_halt: np.ndarray       # (hidden, 1)
    b_halt: np.ndarray       # (1, 1)

    _FIELDS = ("w_in", "w_rec", "b_rec", "w_out", "b_out", "w_halt", "b_halt")

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        """(name, array) pairs in a fixed order; the update order everywhere."""
        for name in self._FIELDS:
            yield name, getattr(self, name)

    def copy(self) -> "CellParams":
        return CellParams(self.kind, self.input_size, self.hidden_size,
                          self.output_size,
                          *(arr.copy() for _, arr in self.items()))

    def validate(self) -> None:
        proj = self.hidden_size * CELLS[self.kind].proj_multiple
        expect = {
            "w_in": (self.input_size + 1, proj),
            "w_rec": (self.hidden_size, proj),
            "b_rec": (1, proj),
            "w_out": (self.hidden_size, self.output_size),
            "b_out": (1, self.output_size),
            "w_halt": (self.hidden_size, 1),
            "b_halt": (1, 1),
        }
        for name, arr in self.items():
            if arr.shape != expect[name]:
                raise DimensionError(
                    f"{name} has shape {arr.shape}, expected {expect[name]}")


@dataclass
class ParamVars:
    """CellParams recorded as leaves on one tape."""

    w_in: Var
    w_rec: Var
    b_rec: Var
    w_out: Var
    b_out: Var
    w_halt: Var
    b_halt: Var

    @classmethod
    def record(cls, tape: Tape, params: CellParams) -> "ParamVars":
        return cls(**{name: tape.leaf(arr) for name, arr in params.items()})

    def items(self) -> Iterator[tuple[str, Var]]:
        for name in CellParams._FIELDS:
            yield name, getattr(self, name)


@dataclass
class CellState:
    """Complete dynamic state: hidden activations, plus memory cells for LSTM.

    Rows index batch members; stepping is a pure function of
    (state, input, params).
    """

    hidden: Var
    cell: Optional[Var] = None

    def parts(self) -> tuple[Var, ...]:
        return (self.hidden,) if self.cell is None else (self.hidden, self.cell)


class RnnCell:
    """s' = tanh(x W_in + s W_rec + b)."""

    kind = "rnn"
    proj_multiple = 1

    @staticmethod
    def zero_state(tape: Tape, hidden_size: int, batch: int = 1) -> CellState:
        return CellState(tape.leaf(np.zeros((batch, hidden_size))))

    @staticmethod
    def step(pv: ParamVars, state: CellState, x: Var) -> CellState:
        z = ad.add(ad.add(ad.matmul(x, pv.w_in), ad.matmul(state.hidden, pv.w_rec)),
                   pv.b_rec)
        return CellState(ad.tanh(z))

    @staticmethod
    def from_parts(parts: tuple[Var, ...]) -> CellState:
        return CellState(*parts)


class LstmCell:
    """Forget-gate LSTM without peepholes; gate order i, f, g, o."""

    kind = "lstm"
    proj_multiple = 4

    @staticmethod
    def zero_state(tape: Tape, hidden_size: int, batch: int = 1) -> CellState:
        return CellState(tape.leaf(np.zeros((batch, hidden_size))),
                         tape.leaf(np.zeros((batch, hidden_size))))

    @staticmethod
    def step(pv: ParamVars, state: CellState, x: Var) -> CellState:
        h = state.hidden.data.shape[1]
        z = ad.add(ad.add(ad.matmul(x, pv.w_in), ad.matmul(state.hidden, pv.w_rec)),
                   pv.b_rec)
        i = ad.sigmoid(ad.narrow(z, 1, 0, h))
        f = ad.sigmoid(ad.narrow(z, 1, h, h))
        g = ad.tanh(ad.narrow(z, 1, 2 * h, h))
        o = ad.sigmoid(ad.narrow(z, 1, 3 * h, h))
        c = ad.add(ad.mul(f, state.cell), ad.mul(i, g))
        return CellState(ad.mul(o, ad.tanh(c)), c)

    @staticmethod
    def from_parts(parts: tuple[Var, ...]) -> CellState:
        return CellState(*parts)


CELLS = {"rnn": RnnCell, "lstm": LstmCell}


def readout(pv: ParamVars, state: CellState) -> Var:
    """y = s_visible W_out + b_out."""
    return ad.add(ad.matmul(state.hidden, pv.w_out), pv.b_out)


def halting_activation(pv: ParamVars, state: CellState) -> Var:
    """h = sigmoid(s_visible W_halt + b_halt), one unit per batch row."""
    return ad.sigmoid(ad.add(ad.matmul(state.hidden, pv.w_halt), pv.b_halt))


def init_params(kind: str, input_size: int, hidden_size: int, output_size: int,
                seed, halt_bias: float = 1.0,
                forget_bias: float = 1.0) -> CellParams:
    """Seeded initialization.

    Weights are uniform(-r, r) with r = 1/sqrt(fan_in), drawn in a fixed
    field order so the same seed always yields bit-identical parameters.
    Biases start at zero except the halting bias (positive, to keep early
    pondering short) and the LSTM forget-gate bias.
    """
    if kind not in CELLS:
        raise ContractError(f"unknown cell kind {kind!r}; expected one of {sorted(CELLS)}")
    rng = np.random.default_rng(seed)
    proj = hidden_size * CELLS[kind].proj_multiple

    def draw(rows: int, cols: int) -> np.ndarray:
        r = 1.0 / np.sqrt(rows)
        return rng.uniform(-r, r, size=(rows, cols))

    w_in = draw(input_size + 1, proj)
    w_rec = draw(hidden_size, proj)
    w_out = draw(hidden_size, output_size)
    w_halt = draw(hidden_size, 1)
    b_rec = np.zeros((1, proj))
    if kind == "lstm":
        b_rec[0, hidden_size:2 * hidden_size] = forget_bias
    params = CellParams(kind, input_size, hidden_size, output_size,
                        w_in, w_rec, b_rec,
                        w_out, np.zeros((1, output_size)),
                        w_halt, np.full((1, 1), float(halt_bias)))
    params.validate()
    return params
