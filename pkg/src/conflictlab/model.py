"""Shared-output PINN: Fourier features, residual trunk, per-loss low-rank adapters.

Hidden states are row-major ``(n_points, d_h)`` nodes.  Trunk weights are
stored input-by-output so a layer is ``h @ W + b``; adapter projections keep
the ``D: r x d_h`` / ``B: d_h x r`` shapes used in the orthogonality penalty.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

MIXING_MODES = ("uam", "cam", "lcam")
RHO_MIN, RHO_MAX = 0.15, 0.95
UAM_RHO = 0.5


@dataclass
class TrunkConfig:
    input_dim: int = 1
    hidden_dim: int = 32
    depth: int = 3
    fourier_bands: int = 4
    # keeps the lowest band at pi, the same spacing as 10 bands up to 10*pi
    omega_max: float = 4 * math.pi
    output_dim: int = 1

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if self.hidden_dim < 1 or self.depth < 1 or self.fourier_bands < 1:
            raise ValueError("hidden_dim, depth and fourier_bands must be >= 1")

    @property
    def feature_dim(self) -> int:
        return 2 * self.fourier_bands * self.input_dim


@dataclass
class AdapterConfig:
    n_adapters: int = 0          # K; 0 builds the plain trunk
    rank: int = 16
    alpha_ad: float = 1.0
    mixing: str = "uam"

    def __post_init__(self):
        if self.mixing not in MIXING_MODES:
            raise ValueError(f"mixing must be one of {MIXING_MODES}, got {self.mixing!r}")
        if self.n_adapters < 0 or self.rank < 1:
            raise ValueError("n_adapters must be >= 0 and rank >= 1")


@dataclass
class MixingState:
    """Latent scores ``rho`` and normalized weights ``pi``, both K x L."""

    rho: np.ndarray
    pi: np.ndarray
    mode: str = "uam"

    @classmethod
    def uniform(cls, n_adapters: int, depth: int, mode: str = "uam") -> "MixingState":
        rho = np.full((n_adapters, depth), UAM_RHO)
        return cls(rho=rho, pi=mixing_matrix(rho), mode=mode)

    def set_rho(self, rho, lo: float = RHO_MIN, hi: float = RHO_MAX) -> None:
        rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), self.rho.shape)
        self.rho = np.clip(rho, lo, hi)
        self.pi = mixing_matrix(self.rho)


def fourier_frequencies(cfg: TrunkConfig) -> np.ndarray:
    """``d x (F*d)`` projection; column ``f*d + i`` is ``omega_f e_i``."""
    d, F = cfg.input_dim, cfg.fourier_bands
    omegas = np.arange(1, F + 1) * cfg.omega_max / F
    proj = np.zeros((d, F * d))
    for f in range(F):
        for i in range(d):
            proj[i, f * d + i] = omegas[f]
    return proj


def _interleave_index(n: int) -> np.ndarray:
    idx = np.empty(2 * n, dtype=np.intp)
    idx[0::2] = np.arange(n)
    idx[1::2] = np.arange(n, 2 * n)
    return idx


def fourier_features(x, cfg: TrunkConfig) -> ad.Node:
    """``[sin(w_1 x_1), cos(w_1 x_1), sin(w_1 x_2), ...]`` with ``w_f = f w_max / F``.

    ``x`` is a single point (1-D) or a batch ``(n, d)``.
    """
    x = ad.as_node(x)
    single = x.ndim == 1
    if single:
        x = ad.reshape(x, (1, x.size))
    z = ad.matmul(x, fourier_frequencies(cfg))
    feats = ad.take(ad.concat([ad.sin(z), ad.cos(z)], axis=-1), _interleave_index(z.shape[-1]), axis=-1)
    return feats.reshape_1d() if single else feats


def trunk_block(h, W1, b1, W2, b2) -> ad.Node:
    """Residual block ``h + tanh(tanh(h W1 + b1) W2 + b2)``."""
    inner = ad.tanh(ad.matmul(h, W1) + b1)
    return h + ad.tanh(ad.matmul(inner, W2) + b2)


def adapter_forward(h, D, B) -> ad.Node:
    """Low-rank correction ``B tanh(D h)`` for every row of ``h``."""
    return ad.matmul(ad.tanh(ad.matmul(h, ad.transpose(D))), ad.transpose(B))


def mixing_weights(rho_layer) -> np.ndarray:
    """Normalize scores for one layer: ``pi_k = (1 - rho_k) / sum_j (1 - rho_j)``."""
    slack = 1.0 - np.asarray(rho_layer, dtype=np.float64)
    total = slack.sum()
    if not total > 0:
        raise ValueError("mixing weights undefined: every latent score equals 1")
    return slack / total


def mixing_matrix(rho: np.ndarray) -> np.ndarray:
    if rho.shape[0] == 0:
        return np.zeros_like(rho)
    return np.stack([mixing_weights(rho[:, l]) for l in range(rho.shape[1])], axis=1)


def ortho_regularizer(downs, lam_self: float = 0.01, lam_cross: float = 0.001) -> ad.Node:
    """Orthogonality penalty over down-projections.

    ``downs[l]`` lists the ``r x d_h`` matrices of every adapter at layer ``l``
    (a flat list is treated as one layer).
    """
    if downs and not isinstance(downs[0], (list, tuple)):
        downs = [downs]
    self_terms, cross_terms = [], []
    for layer in downs:
        Ds = [ad.as_node(D) for D in layer]
        for D in Ds:
            gram = ad.matmul(D, ad.transpose(D)) - np.eye(D.shape[0])
            self_terms.append(ad.sum(ad.square(gram)))
        for i in range(len(Ds)):
            for j in range(i + 1, len(Ds)):
                cross_terms.append(ad.sum(ad.square(ad.matmul(Ds[i], ad.transpose(Ds[j])))))
    total = ad.mul(lam_self, ad.sum_nodes(self_terms))
    if cross_terms:
        total = total + ad.mul(lam_cross, ad.sum_nodes(cross_terms))
    return total


def _glorot(rng, fan_in, fan_out):
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


class PINN:
    """Fourier-feature residual trunk with optional per-loss adapters.

    Trunk and adapter parameters are drawn from separate seeded streams, so a
    model with adapters shares its trunk initialization with the plain model
    built from the same seed.
    """

    def __init__(self, trunk: TrunkConfig, adapters: AdapterConfig | None = None,
                 seed: int = 0, physical: dict[str, float] | None = None):
        self.trunk = trunk
        self.adapters = adapters or AdapterConfig()
        self.seed = seed
        if self.adapters.n_adapters and self.adapters.rank > trunk.hidden_dim:
            raise ValueError("adapter rank must not exceed hidden_dim")
        self.mixing = MixingState.uniform(self.adapters.n_adapters, trunk.depth, self.adapters.mixing)
        self.params: dict[str, np.ndarray] = {}
        self._init_params(physical or {})

    # -- parameters ---------------------------------------------------------

    def _init_params(self, physical):
        t = self.trunk
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0]))
        p = self.params
        p["trunk.in.W"] = _glorot(rng, t.feature_dim, t.hidden_dim)
        p["trunk.in.b"] = np.zeros(t.hidden_dim)
        for l in range(t.depth):
            p[f"trunk.block{l}.W1"] = _glorot(rng, t.hidden_dim, t.hidden_dim)
            p[f"trunk.block{l}.b1"] = np.zeros(t.hidden_dim)
            p[f"trunk.block{l}.W2"] = _glorot(rng, t.hidden_dim, t.hidden_dim)
            p[f"trunk.block{l}.b2"] = np.zeros(t.hidden_dim)
        p["readout.W"] = _glorot(rng, t.hidden_dim, t.output_dim)
        p["readout.b"] = np.zeros(t.output_dim)
        a = self.adapters
        arng = np.random.default_rng(np.random.SeedSequence([self.seed, 1]))
        for k in range(a.n_adapters):
            for l in range(t.depth):
                p[f"adapter{k}.layer{l}.D"] = arng.normal(0.0, 1.0 / math.sqrt(t.hidden_dim),
                                                          size=(a.rank, t.hidden_dim))
                p[f"adapter{k}.layer{l}.B"] = np.zeros((t.hidden_dim, a.rank))
        for name, init in physical.items():
            if init <= 0:
                raise ValueError(f"physical scalar {name!r} must be positive (log-parameterized)")
            p[f"phys.{name}"] = np.array(math.log(init))

    @property
    def adapters_active(self) -> bool:
        return self.adapters.n_adapters > 0 and self.adapters.alpha_ad != 0.0

    @property
    def physical_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("phys.")]

    def trainable_names(self) -> list[str]:
        """Parameters the optimizer updates; inert adapters (alpha_ad = 0) are frozen."""
        if self.adapters_active:
            return list(self.params)
        return [n for n in self.params if not n.startswith("adapter")]

    def leaves(self) -> dict[str, ad.Node]:
        return {n: ad.param(v, n) for n, v in self.params.items()}

    def param_count(self, include_physical: bool = False) -> int:
        return int(np.sum([v.size for n, v in self.params.items()
                           if include_physical or not n.startswith("phys.")], dtype=int))

    def vector(self) -> ad.ParamVector:
        return ad.ParamVector(self.params)

    def load_vector(self, vec: ad.ParamVector) -> None:
        for n, v in vec.blocks.items():
            self.params[n] = v.reshape(self.params[n].shape).copy()

    def physical_value(self, name: str) -> float:
        return math.exp(float(self.params[f"phys.{name}"]))

    # -- forward ------------------------------------------------------------

    def forward_trace(self, x, leaves=None) -> tuple[ad.Node, list[ad.Node]]:
        """Field values and the hidden states ``h^(0) .. h^(L)``."""
        lv = leaves if leaves is not None else self.leaves()
        h = ad.matmul(fourier_features(x, self.trunk), lv["trunk.in.W"]) + lv["trunk.in.b"]
        trace = [h]
        active = self.adapters_active
        for l in range(self.trunk.depth):
            h_trunk = trunk_block(h, lv[f"trunk.block{l}.W1"], lv[f"trunk.block{l}.b1"],
                                  lv[f"trunk.block{l}.W2"], lv[f"trunk.block{l}.b2"])
            if active:
                corr = None
                for k in range(self.adapters.n_adapters):
                    a_k = adapter_forward(h, lv[f"adapter{k}.layer{l}.D"], lv[f"adapter{k}.layer{l}.B"])
                    term = ad.mul(float(self.mixing.pi[k, l]), a_k)
                    corr = term if corr is None else corr + term
                h_trunk = h_trunk + ad.mul(float(self.adapters.alpha_ad), corr)
            h = h_trunk
            trace.append(h)
        u = ad.matmul(h, lv["readout.W"]) + lv["readout.b"]
        return u, trace

    def forward(self, x, leaves=None) -> ad.Node:
        return self.forward_trace(x, leaves)[0]

    def field(self, leaves):
        """Callable ``x -> u`` bound to one set of parameter leaves."""
        return lambda x: self.forward(x, leaves)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(ad.const(np.atleast_2d(x))).value

    def ortho_penalty(self, leaves, lam_self: float, lam_cross: float) -> ad.Node | None:
        if not self.adapters_active:
            return None
        downs = [[leaves[f"adapter{k}.layer{l}.D"] for k in range(self.adapters.n_adapters)]
                 for l in range(self.trunk.depth)]
        return ortho_regularizer(downs, lam_self, lam_cross)

    # -- checkpoints --------------------------------------------------------

    def header(self) -> dict:
        return {
            "trunk": asdict(self.trunk),
            "adapters": asdict(self.adapters),
            "seed": self.seed,
            "rho": self.mixing.rho.tolist(),
            "blocks": [[n, list(v.shape)] for n, v in self.params.items()],
        }


def save_checkpoint(model: PINN, path) -> None:
    """Write a JSON header line followed by a raw float64 dump of every block."""
    header = json.dumps(model.header()).encode()
    flat = model.vector().flat().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(flat.tobytes())


def load_checkpoint(path) -> PINN:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        data = np.frombuffer(fh.read(), dtype="<f8")
    blocks = [(n, tuple(s)) for n, s in header["blocks"]]
    physical = {n[len("phys."):]: 1.0 for n, _ in blocks if n.startswith("phys.")}
    model = PINN(TrunkConfig(**header["trunk"]), AdapterConfig(**header["adapters"]),
                 seed=header["seed"], physical=physical)
    expected = [(n, v.shape) for n, v in model.params.items()]
    if expected != blocks:
        raise ValueError("checkpoint block layout does not match its configuration")
    total = int(np.sum([math.prod(s) for _, s in blocks], dtype=int))
    if data.size != total:
        raise ValueError(f"checkpoint holds {data.size} values, header expects {total}")
    start = 0
    for n, shape in blocks:
        size = math.prod(shape)
        model.params[n] = data[start:start + size].reshape(shape).copy()
        start += size
    if model.adapters.n_adapters:
        model.mixing.set_rho(np.asarray(header["rho"]))
    return model
