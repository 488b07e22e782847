"""Multilayer perceptrons on top of the autodiff engine."""
from __future__ import annotations

import hashlib
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as ad
from .tensor import Tensor

ACTIVATIONS = ("softplus", "relu", "none")


class Mlp:
    """Fully connected network ``widths[0] -> ... -> widths[-1]``.

    ``activations[i]`` is applied after layer ``i``; the last entry is
    usually ``"none"``. Softplus uses sharpness ``beta``.
    """

    def __init__(self, widths: Sequence[int], activations: Sequence[str], beta: float = 100.0,
                 rng: Optional[np.random.Generator] = None, init: str = "he"):
        widths = [int(w) for w in widths]
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        if len(activations) != len(widths) - 1:
            raise ValueError(f"{len(widths) - 1} layers but {len(activations)} activations")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.widths = widths
        self.activations = list(activations)
        self.beta = float(beta)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: List[Tensor] = []
        self.biases: List[Tensor] = []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            if init == "he":
                w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
            elif init == "xavier":
                lim = np.sqrt(6.0 / (n_in + n_out))
                w = rng.uniform(-lim, lim, size=(n_in, n_out))
            else:
                raise ValueError(f"unknown init {init!r}")
            self.weights.append(ad.parameter(w, name=f"w{i}"))
            self.biases.append(ad.parameter(np.zeros((1, n_out)), name=f"b{i}"))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> List[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    def load_arrays(self, arrays: Dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix).items():
            a = np.asarray(arrays[name], dtype=ad.DTYPE).reshape(p.shape)
            p.data = a.copy()

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], prefix: str, activations_for, beta: float = 100.0) -> "Mlp":
        """Rebuild from checkpoint tensors; widths are inferred from weight shapes."""
        shapes = []
        i = 0
        while f"{prefix}w{i}" in arrays:
            shapes.append(np.asarray(arrays[f"{prefix}w{i}"]).shape)
            i += 1
        if not shapes:
            raise KeyError(f"no weights with prefix {prefix!r}")
        widths = [shapes[0][0]] + [s[1] for s in shapes]
        net = cls(widths, activations_for(len(shapes)), beta=beta)
        net.load_arrays(arrays, prefix)
        return net

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # -- graph forward --------------------------------------------------------
    def _act(self, z: Tensor, kind: str) -> Tensor:
        if kind == "softplus":
            return ad.softplus(z, self.beta)
        if kind == "relu":
            return ad.relu(z)
        return z

    def _act_deriv(self, z: Tensor, kind: str) -> Optional[Tensor]:
        if kind == "softplus":
            return ad.sigmoid(z, self.beta)
        if kind == "relu":
            return ad.step(z)
        return None

    def __call__(self, x: Tensor, pre_bias: Optional[Tensor] = None) -> Tensor:
        return self.forward(x, pre_bias)

    def forward(self, x: Tensor, pre_bias: Optional[Tensor] = None) -> Tensor:
        """Graph forward; ``pre_bias`` is added to the first pre-activation."""
        h = x if isinstance(x, Tensor) else Tensor(x)
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            z = ad.matmul(h, w) + b
            if i == 0 and pre_bias is not None:
                z = z + pre_bias
            h = self._act(z, act)
        return h

    def forward_with_input_grad(self, x: Tensor, pre_bias: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        """Scalar-output forward plus ``d out / d x`` as an ordinary graph.

        The input gradient is assembled from first-order ops (matmul with
        transposed weights, products with activation derivatives), so
        backpropagating any loss on it yields exact parameter gradients
        without second-order machinery.
        """
        if self.widths[-1] != 1:
            raise ValueError("input gradient requires a scalar-output network")
        h = x if isinstance(x, Tensor) else Tensor(x)
        derivs = []
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            z = ad.matmul(h, w) + b
            if i == 0 and pre_bias is not None:
                z = z + pre_bias
            if act == "softplus":
                h, slope = ad.softplus_with_slope(z, self.beta)
                derivs.append(slope)
            else:
                derivs.append(self._act_deriv(z, act))
                h = self._act(z, act)
        n = h.shape[0]
        g = Tensor(np.ones((n, 1)))
        for i in range(self.n_layers - 1, -1, -1):
            if derivs[i] is not None:
                g = g * derivs[i]
            g = ad.matmul(g, self.weights[i].T)
        return h, g

    # -- numpy fast paths for frozen evaluation ---------------------------------------
    def _np_act(self, z, kind):
        if kind == "softplus":
            return ad.softplus_np(z, self.beta)
        if kind == "relu":
            return np.maximum(z, 0.0)
        return z

    def evaluate(self, x: np.ndarray, pre_bias: Optional[np.ndarray] = None, chunk: int = 65536,
                 dtype=np.float64) -> np.ndarray:
        x = np.asarray(x, dtype=dtype)
        Ws = [w.data.astype(dtype) for w in self.weights]
        bs = [b.data.astype(dtype) for b in self.biases]
        pb = None if pre_bias is None else np.asarray(pre_bias, dtype=dtype)
        out = np.empty((len(x), self.widths[-1]), dtype=dtype)
        for s in range(0, len(x), chunk):
            h = x[s:s + chunk]
            for i, act in enumerate(self.activations):
                z = h @ Ws[i] + bs[i]
                if i == 0 and pb is not None:
                    z = z + (pb if pb.shape[0] == 1 else pb[s:s + chunk])
                h = self._np_act(z, act)
            out[s:s + chunk] = h
        return out

    def evaluate_with_grad(self, x: np.ndarray, pre_bias: Optional[np.ndarray] = None,
                           chunk: int = 65536) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        pb = pre_bias
        vals = np.empty((len(x), 1))
        grads = np.empty((len(x), self.widths[0]))
        for s in range(0, len(x), chunk):
            h = x[s:s + chunk]
            ds = []
            for i, act in enumerate(self.activations):
                z = h @ self.weights[i].data + self.biases[i].data
                if i == 0 and pb is not None:
                    z = z + (pb if pb.shape[0] == 1 else pb[s:s + chunk])
                if act == "softplus":
                    sp, sl = ad._softplus_parts(self.beta * z)
                    ds.append(sl)
                    h = sp / self.beta
                    continue
                ds.append((z > 0).astype(np.float64) if act == "relu" else None)
                h = self._np_act(z, act)
            g = np.ones((len(h), 1))
            for i in range(self.n_layers - 1, -1, -1):
                if ds[i] is not None:
                    g = g * ds[i]
                g = g @ self.weights[i].data.T
            vals[s:s + chunk] = h
            grads[s:s + chunk] = g
        return vals[:, 0], grads


def geometric_init(net: Mlp, radius: float, rng: np.random.Generator, input_dims: int = 3) -> None:
    """Initialise a softplus/ReLU network so that ``net(x) ~ |x| - radius``.

    Hidden layers draw ``N(0, 2/fan_out)``; the output layer draws around
    ``sqrt(pi / fan_in)`` with bias ``-radius``. Columns of the first layer
    beyond ``input_dims`` (conditioning inputs) start at zero.
    """
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        n_in, n_out = w.shape
        if i == net.n_layers - 1:
            w.data = rng.normal(np.sqrt(np.pi) / np.sqrt(n_in), 1e-4, size=(n_in, n_out))
            b.data = np.full((1, n_out), -float(radius))
        else:
            w.data = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(n_out), size=(n_in, n_out))
            if i == 0 and n_in > input_dims:
                w.data[input_dims:] = 0.0
            b.data = np.zeros((1, n_out))
